"""Listening-test service: administers same/different judgments and
computes decision error rates.

Two protocols: "trivial" presents per_event questions for each event
type in the manifest; "disguise" presents counted same-speaker
normal/disguised pairs plus uncounted imposter pairs that only inject
noise.  State persists as an append-only JSONL event log (create /
answer / replay / finalize records); a restart replays the log.  Audio
is addressed by opaque per-trial tokens so no response ever carries a
speaker id, an utterance id, or the trial's ground truth before
finalize.
"""

import json
import logging
import os
import time
import uuid
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .corpus import CorpusManifest, EventType, load_manifest
from .evaluation import HumanSession, HumanTrial, Trial, compute_der, gen_human_trials

logger = logging.getLogger(__name__)


@dataclass
class SessionConfig:
    protocol: str = "trivial"        # trivial | disguise
    per_event: int = 6               # counted trials per event (or total, disguise)
    p_target: float = 0.5
    imposter_noise: int = 2          # uncounted disguise trials
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in ("trivial", "disguise"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.per_event < 1:
            raise ValueError("per_event must be >= 1")
        if not (0.0 <= self.p_target <= 1.0):
            raise ValueError("p_target must be in [0, 1]")
        if self.imposter_noise < 0:
            raise ValueError("imposter_noise must be >= 0")


class SessionState:
    def __init__(self, session: HumanSession, cfg: SessionConfig, tokens: list):
        self.session = session
        self.cfg = cfg
        self.tokens = tokens              # (token_a, token_b) per trial
        self.finalized = False
        self.replays = {}                 # (trial, side) -> count


class DuplicateAnswerError(ValueError):
    pass


def _gen_disguise_trials(manifest: CorpusManifest, counted: int, noise: int,
                         seed: int) -> list:
    """Counted same-speaker normal/disguised pairs + uncounted imposters."""
    normal = {}
    disguised = {}
    for r in manifest.records:
        if r.event == EventType.NORMAL:
            normal.setdefault(r.spk_id, []).append(r.utt_id)
        elif r.event == EventType.DISGUISED:
            disguised.setdefault(r.spk_id, []).append(r.utt_id)
    both = sorted(set(normal) & set(disguised))
    if not both:
        raise ValueError("no speaker has both normal and disguised audio")
    if noise > 0 and (len(normal) < 2 or len(disguised) < 2):
        raise ValueError("imposter trials need at least 2 speakers per style")

    rng = np.random.default_rng(seed)
    used = set()
    trials = []

    def pick(pool):
        return pool[rng.integers(len(pool))]

    for _ in range(counted):
        for _attempt in range(1000):
            s = both[rng.integers(len(both))]
            pair = (pick(normal[s]), pick(disguised[s]))
            if pair not in used:
                used.add(pair)
                trials.append(HumanTrial(Trial(pair[0], pair[1], True), counted=True))
                break
        else:
            raise ValueError("cannot sample enough distinct same-speaker pairs")
    spks_n, spks_d = sorted(normal), sorted(disguised)
    for _ in range(noise):
        for _attempt in range(1000):
            a = spks_n[rng.integers(len(spks_n))]
            b = spks_d[rng.integers(len(spks_d))]
            if a == b:
                continue
            pair = (pick(normal[a]), pick(disguised[b]))
            if pair not in used:
                used.add(pair)
                trials.append(HumanTrial(Trial(pair[0], pair[1], False), counted=False))
                break
        else:
            raise ValueError("cannot sample enough distinct imposter pairs")
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


class ListenService:
    """Session registry + append-only persistence; transport-agnostic."""

    def __init__(self, manifest: CorpusManifest, log_path):
        self.manifest = manifest
        self.audio_of = {r.utt_id: manifest.audio_path(r) for r in manifest.records}
        self.log_path = Path(log_path)
        self.sessions: dict = {}
        self.token_info: dict = {}        # token -> (session_id, trial, side, utt_id)
        if self.log_path.exists():
            self._replay_log()
        self._log = open(self.log_path, "a", encoding="utf-8")

    # -- persistence ---------------------------------------------------

    def _append(self, record: dict) -> None:
        record["ts"] = time.time()
        line = json.dumps(record, sort_keys=True)
        self._log.write(line + "\n")
        self._log.flush()
        os.fsync(self._log.fileno())

    def _replay_log(self) -> None:
        n = 0
        with open(self.log_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                self._apply(json.loads(line))
                n += 1
        logger.info("replayed %d events from %s (%d sessions)",
                    n, self.log_path, len(self.sessions))

    def _apply(self, rec: dict) -> None:
        kind = rec["type"]
        if kind == "create":
            cfg = SessionConfig(**rec["config"])
            sid = rec["session_id"]
            trials = []
            tokens = []
            for k, t in enumerate(rec["trials"]):
                event = EventType(t["event"]) if t.get("event") else None
                trials.append(HumanTrial(Trial(t["utt_a"], t["utt_b"],
                                               t["is_target"], event=event),
                                         counted=t["counted"]))
                tokens.append((t["token_a"], t["token_b"]))
                self.token_info[t["token_a"]] = (sid, k, "a", t["utt_a"])
                self.token_info[t["token_b"]] = (sid, k, "b", t["utt_b"])
            session = HumanSession(session_id=sid, trials=trials)
            self.sessions[sid] = SessionState(session, cfg, tokens)
        elif kind == "answer":
            st = self.sessions[rec["session_id"]]
            st.session.record_answer(rec["trial"], rec["same"], rec.get("ts", 0.0))
        elif kind == "replay":
            st = self.sessions[rec["session_id"]]
            key = (rec["trial"], rec["side"])
            st.replays[key] = st.replays.get(key, 0) + 1
        elif kind == "finalize":
            self.sessions[rec["session_id"]].finalized = True
        else:
            raise ValueError(f"unknown log record type {kind!r}")

    # -- operations ----------------------------------------------------

    def create_session(self, cfg: SessionConfig) -> str:
        if cfg.protocol == "trivial":
            tl = gen_human_trials(self.manifest, per_event=cfg.per_event,
                                  p_target=cfg.p_target, seed=cfg.seed)
            trials = [HumanTrial(t, counted=True) for t in tl]
        else:
            trials = _gen_disguise_trials(self.manifest, cfg.per_event,
                                          cfg.imposter_noise, cfg.seed)
        for ht in trials:
            for u in (ht.trial.utt_a, ht.trial.utt_b):
                if u not in self.audio_of:
                    raise ValueError(f"utterance {u} has no audio")
        session_id = uuid.uuid4().hex
        tokens = [(uuid.uuid4().hex, uuid.uuid4().hex) for _ in trials]
        self._append({
            "type": "create",
            "session_id": session_id,
            "config": {"protocol": cfg.protocol, "per_event": cfg.per_event,
                       "p_target": cfg.p_target,
                       "imposter_noise": cfg.imposter_noise, "seed": cfg.seed},
            "trials": [{
                "utt_a": ht.trial.utt_a, "utt_b": ht.trial.utt_b,
                "is_target": ht.trial.is_target,
                "event": ht.trial.event.value if ht.trial.event else None,
                "counted": ht.counted,
                "token_a": ta, "token_b": tb,
            } for ht, (ta, tb) in zip(trials, tokens)],
        })
        session = HumanSession(session_id=session_id, trials=trials)
        self.sessions[session_id] = SessionState(session, cfg, tokens)
        for k, ((ta, tb), ht) in enumerate(zip(tokens, trials)):
            self.token_info[ta] = (session_id, k, "a", ht.trial.utt_a)
            self.token_info[tb] = (session_id, k, "b", ht.trial.utt_b)
        return session_id

    def _state(self, session_id: str) -> SessionState:
        if session_id not in self.sessions:
            raise KeyError(f"unknown session {session_id}")
        return self.sessions[session_id]

    def trial_view(self, session_id: str, k: int) -> dict:
        """Client-safe trial metadata: no identities, no ground truth."""
        st = self._state(session_id)
        if not (0 <= k < len(st.session.trials)):
            raise IndexError(f"no trial {k}")
        ht = st.session.trials[k]
        ta, tb = st.tokens[k]
        return {
            "index": k,
            "n_trials": len(st.session.trials),
            "event": ht.trial.event.value if ht.trial.event else None,
            "audio_a": f"/audio/{ta}",
            "audio_b": f"/audio/{tb}",
            "answered": k in st.session.answers,
        }

    def submit_answer(self, session_id: str, k: int, answer: str) -> dict:
        st = self._state(session_id)
        if answer not in ("same", "different"):
            raise ValueError("answer must be 'same' or 'different'")
        if st.finalized:
            raise ValueError("session already finalized")
        if not (0 <= k < len(st.session.trials)):
            raise IndexError(f"no trial {k}")
        if k in st.session.answers:
            raise DuplicateAnswerError(f"trial {k} already answered")
        ts = time.time()
        # durable before acknowledged
        self._append({"type": "answer", "session_id": session_id,
                      "trial": k, "same": answer == "same"})
        st.session.record_answer(k, answer == "same", ts)
        return {"ok": True, "index": k,
                "remaining": sum(1 for i in range(len(st.session.trials))
                                 if i not in st.session.answers)}

    def audio_bytes(self, token: str) -> bytes:
        if token not in self.token_info:
            raise KeyError("unknown audio token")
        sid, k, side, utt = self.token_info[token]
        self._append({"type": "replay", "session_id": sid, "trial": k,
                      "side": side})
        st = self.sessions[sid]
        st.replays[(k, side)] = st.replays.get((k, side), 0) + 1
        return Path(self.audio_of[utt]).read_bytes()

    def finalize(self, session_id: str) -> dict:
        st = self._state(session_id)
        if not st.finalized:
            missing = [i for i, ht in enumerate(st.session.trials)
                       if ht.counted and i not in st.session.answers]
            if missing:
                raise ValueError(f"trials unanswered: {missing}")
            self._append({"type": "finalize", "session_id": session_id})
            st.finalized = True
        return self.report(session_id)

    def report(self, session_id: str) -> dict:
        st = self._state(session_id)
        if not st.finalized:
            raise ValueError("session not finalized")
        der = compute_der(st.session)
        # the Fraction reduces, so keep the raw counts alongside it
        wrong = sum(1 for i, ht in enumerate(st.session.trials)
                    if ht.counted and st.session.answers[i] != ht.trial.is_target)
        total = sum(1 for ht in st.session.trials if ht.counted)
        out = {
            "session_id": session_id,
            "protocol": st.cfg.protocol,
            "n_counted": total,
            "n_wrong": wrong,
            "der": float(der),
            "der_exact": f"{wrong}/{total}",
            "replays": int(sum(st.replays.values())),
            "per_event": {},
        }
        if st.cfg.protocol == "trivial":
            events = []
            for ht in st.session.trials:
                if ht.trial.event and ht.trial.event not in events:
                    events.append(ht.trial.event)
            for ev in events:
                ev_der = compute_der(st.session, event=ev)
                ev_total = sum(1 for ht in st.session.trials
                               if ht.counted and ht.trial.event == ev)
                ev_wrong = sum(1 for i, ht in enumerate(st.session.trials)
                               if ht.counted and ht.trial.event == ev
                               and st.session.answers[i] != ht.trial.is_target)
                out["per_event"][ev.value] = {"n": ev_total, "wrong": ev_wrong,
                                              "der": float(ev_der)}
        return out

    def close(self) -> None:
        self._log.close()


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

def create_app(manifest_path=None, log_path=None, manifest: CorpusManifest | None = None):
    from fastapi import FastAPI, HTTPException, Response
    from fastapi.middleware.cors import CORSMiddleware
    from pydantic import BaseModel

    if manifest is None:
        if manifest_path is None:
            raise ValueError("need a manifest or a manifest path")
        manifest = load_manifest(manifest_path)
    if log_path is None:
        raise ValueError("need a log path")
    svc = ListenService(manifest, log_path)

    class CreateBody(BaseModel):
        protocol: str = "trivial"
        per_event: int = 6
        p_target: float = 0.5
        imposter_noise: int = 2
        seed: int = 0

    class AnswerBody(BaseModel):
        answer: str

    app = FastAPI(title="listening test service")
    # the browser client is served statically from elsewhere
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    app.state.service = svc

    def _wrap(fn, *args, not_found=(KeyError, IndexError)):
        try:
            return fn(*args)
        except not_found as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    @app.post("/sessions")
    def post_sessions(body: CreateBody):
        try:
            cfg = SessionConfig(protocol=body.protocol, per_event=body.per_event,
                                p_target=body.p_target,
                                imposter_noise=body.imposter_noise, seed=body.seed)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        try:
            sid = svc.create_session(cfg)
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        st = svc.sessions[sid]
        return {"session_id": sid, "n_trials": len(st.session.trials),
                "protocol": cfg.protocol}

    @app.get("/sessions/{sid}/trials/{k}")
    def get_trial(sid: str, k: int):
        return _wrap(svc.trial_view, sid, k)

    @app.get("/audio/{token}")
    def get_audio(token: str):
        data = _wrap(svc.audio_bytes, token)
        return Response(content=data, media_type="audio/wav")

    @app.post("/sessions/{sid}/trials/{k}/answer")
    def post_answer(sid: str, k: int, body: AnswerBody):
        if body.answer not in ("same", "different"):
            raise HTTPException(status_code=422,
                                detail="answer must be 'same' or 'different'")
        return _wrap(svc.submit_answer, sid, k, body.answer)

    @app.post("/sessions/{sid}/finalize")
    def post_finalize(sid: str):
        return _wrap(svc.finalize, sid)

    @app.get("/sessions/{sid}/report")
    def get_report(sid: str):
        return _wrap(svc.report, sid)

    return app
