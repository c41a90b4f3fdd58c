"""Trial generation, scoring harness, and EER/DER computation.

Machine protocol: every unordered pair of utterances of one event type
is a trial (same speaker = target).  Human protocol: a small seeded
sample of pairs per event answered same/different by a listener; the
decision error rate is the fraction of wrong answers, kept as an exact
rational until display.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .backend import LdaTransform, PldaModel, ScoringMethod, plda_llr_scores
from .corpus import CorpusManifest, EventType
from .tvspace import SpeakerVector

SCORE_CHUNK = 8192


@dataclass(slots=True)
class Trial:
    utt_a: str
    utt_b: str
    is_target: bool
    event: EventType | None = None   # tagged on mixed-event (human) lists

    def __post_init__(self):
        if self.utt_a == self.utt_b:
            raise ValueError("a trial cannot pair an utterance with itself")

    @property
    def key(self) -> tuple:
        return (self.utt_a, self.utt_b) if self.utt_a <= self.utt_b else (self.utt_b, self.utt_a)


@dataclass
class TrialList:
    trials: list
    event: EventType | None = None

    def __post_init__(self):
        seen = set()
        for t in self.trials:
            k = t.key
            if k in seen:
                raise ValueError(f"duplicate trial pair {k}")
            seen.add(k)

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def n_target(self) -> int:
        return sum(1 for t in self.trials if t.is_target)


@dataclass
class EvalReport:
    eer: float
    threshold_at_eer: float
    n_target: int
    n_nontarget: int
    det_points: list          # (threshold, far, frr) per swept threshold


@dataclass
class HumanTrial:
    trial: Trial
    counted: bool = True


@dataclass
class HumanSession:
    session_id: str
    trials: list                                  # of HumanTrial
    answers: dict = field(default_factory=dict)   # index -> listener said "same"
    timestamps: dict = field(default_factory=dict)

    def record_answer(self, index: int, said_same: bool, timestamp: float = 0.0):
        if not (0 <= index < len(self.trials)):
            raise KeyError(f"no trial {index} in session {self.session_id}")
        if index in self.answers:
            raise ValueError(f"trial {index} already answered")
        self.answers[index] = bool(said_same)
        self.timestamps[index] = timestamp


def gen_exhaustive_trials(manifest: CorpusManifest, event: EventType) -> TrialList:
    """All C(n, 2) unordered same-event pairs, lexicographic order."""
    utts = sorted(u.utt_id for u in manifest.by_event(event))
    if len(utts) < 2:
        raise ValueError(f"fewer than 2 utterances for event {event.value}")
    spk = {u.utt_id: u.spk_id for u in manifest.by_event(event)}
    trials = [Trial(a, b, spk[a] == spk[b], event=event)
              for i, a in enumerate(utts) for b in utts[i + 1:]]
    return TrialList(trials, event=event)


def gen_human_trials(manifest: CorpusManifest, per_event: int = 6,
                     p_target: float = 0.5, seed: int = 0) -> TrialList:
    """Seeded sample of per_event same-event pairs for every event type.

    Each trial is a target with probability p_target; an utterance never
    pairs with itself, and no unordered pair repeats.
    """
    if per_event < 1:
        raise ValueError("per_event must be >= 1")
    rng = np.random.default_rng(seed)
    trials = []
    used = set()
    for event in manifest.events():
        records = sorted(manifest.by_event(event), key=lambda u: u.utt_id)
        by_spk: dict = {}
        for u in records:
            by_spk.setdefault(u.spk_id, []).append(u.utt_id)
        multi = [s for s, us in sorted(by_spk.items()) if len(us) >= 2]
        speakers = sorted(by_spk)
        if len(speakers) < 2 or not multi:
            raise ValueError(f"event {event.value}: need >= 2 speakers and "
                             "one speaker with >= 2 utterances")
        for _ in range(per_event):
            for _attempt in range(1000):
                want_target = bool(rng.random() < p_target)
                if want_target:
                    s = multi[rng.integers(len(multi))]
                    a, b = rng.choice(len(by_spk[s]), size=2, replace=False)
                    pair = (by_spk[s][a], by_spk[s][b])
                else:
                    i, j = rng.choice(len(speakers), size=2, replace=False)
                    ua = by_spk[speakers[i]]
                    ub = by_spk[speakers[j]]
                    pair = (ua[rng.integers(len(ua))], ub[rng.integers(len(ub))])
                key = tuple(sorted(pair))
                if key not in used:
                    used.add(key)
                    trials.append(Trial(pair[0], pair[1], want_target, event=event))
                    break
            else:
                raise ValueError(f"event {event.value}: cannot sample a fresh pair")
    return TrialList(trials, event=None)


# ---------------------------------------------------------------------------
# scoring harness
# ---------------------------------------------------------------------------

def _vector_matrix(trials, vectors) -> tuple:
    """Stack the needed vectors once; trials index into the stack."""
    ids = []
    index = {}
    for t in trials:
        for u in (t.utt_a, t.utt_b):
            if u not in index:
                if u not in vectors:
                    raise KeyError(f"no vector for utterance {u!r}")
                index[u] = len(ids)
                ids.append(u)
    mat = np.stack([np.asarray(vectors[u].values if isinstance(vectors[u], SpeakerVector)
                               else vectors[u], dtype=np.float64) for u in ids])
    ia = np.array([index[t.utt_a] for t in trials], dtype=np.int64)
    ib = np.array([index[t.utt_b] for t in trials], dtype=np.int64)
    return mat, ia, ib


def score_trials(trials, vectors, method: ScoringMethod = ScoringMethod.COSINE,
                 lda: LdaTransform | None = None,
                 plda: PldaModel | None = None) -> np.ndarray:
    """One finite score per trial, order-aligned; streams in chunks."""
    method = ScoringMethod(method)
    trial_seq = list(trials)
    if not trial_seq:
        return np.zeros(0)
    mat, ia, ib = _vector_matrix(trial_seq, vectors)

    if method is ScoringMethod.LDA_COSINE:
        if lda is None:
            raise ValueError("lda-cosine scoring needs an LdaTransform")
        mat = (mat - lda.mean) @ lda.projection
    if method in (ScoringMethod.COSINE, ScoringMethod.LDA_COSINE):
        norms = np.linalg.norm(mat, axis=1)
        bad = np.nonzero(norms == 0.0)[0]
        if bad.size:
            raise ValueError("zero-norm vector in scoring input")
        unit = mat / norms[:, None]
        out = np.empty(len(trial_seq))
        for lo in range(0, len(trial_seq), SCORE_CHUNK):
            hi = min(lo + SCORE_CHUNK, len(trial_seq))
            out[lo:hi] = np.einsum("ij,ij->i", unit[ia[lo:hi]], unit[ib[lo:hi]])
        return out

    if plda is None:
        raise ValueError("plda scoring needs a PldaModel")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm vector in scoring input")
    unit = mat / norms[:, None]           # length-normalize before PLDA
    out = np.empty(len(trial_seq))
    for lo in range(0, len(trial_seq), SCORE_CHUNK):
        hi = min(lo + SCORE_CHUNK, len(trial_seq))
        out[lo:hi] = plda_llr_scores(plda, unit[ia[lo:hi]], unit[ib[lo:hi]])
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite score produced")
    return out


# ---------------------------------------------------------------------------
# EER
# ---------------------------------------------------------------------------

def compute_eer(scores, labels) -> EvalReport:
    """Threshold sweep over all distinct scores plus one sentinel above.

    FAR(t) = #(nontarget >= t) / n_nontarget, FRR(t) = #(target < t) /
    n_target.  The EER is read off where the two piecewise-linear
    curves cross, interpolating between adjacent swept thresholds.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and aligned")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score")
    n_t = int(y.sum())
    n_n = int((~y).sum())
    if n_t == 0 or n_n == 0:
        raise ValueError("need at least one target and one nontarget")

    tgt = np.sort(s[y])
    non = np.sort(s[~y])
    thresholds = np.unique(s)
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    far = (n_n - np.searchsorted(non, thresholds, side="left")) / n_n
    frr = np.searchsorted(tgt, thresholds, side="left") / n_t

    diff = far - frr
    det_points = [(float(t), float(fa), float(fr))
                  for t, fa, fr in zip(thresholds, far, frr)]
    # diff starts at +1 (everything accepted at t = min) and ends at -1
    idx = int(np.argmax(diff <= 0.0))
    if diff[idx] == 0.0:
        eer = float(far[idx])
        thr = float(thresholds[idx])
    else:
        d0, d1 = diff[idx - 1], diff[idx]
        alpha = d0 / (d0 - d1)
        eer = float(far[idx - 1] + alpha * (far[idx] - far[idx - 1]))
        thr = float(thresholds[idx - 1] + alpha * (thresholds[idx] - thresholds[idx - 1]))
    return EvalReport(eer=eer, threshold_at_eer=thr, n_target=n_t,
                      n_nontarget=n_n, det_points=det_points)


# ---------------------------------------------------------------------------
# DER
# ---------------------------------------------------------------------------

def compute_der(session: HumanSession, event: EventType | None = None) -> Fraction:
    """Wrong answers / counted trials as an exact rational.

    Uncounted (noise) trials are excluded; every counted trial must have
    an answer.  Pass an event to restrict to that event's trials.
    """
    wrong = 0
    total = 0
    for i, ht in enumerate(session.trials):
        if not ht.counted:
            continue
        if event is not None and ht.trial.event != event:
            continue
        if i not in session.answers:
            raise ValueError(f"trial {i} unanswered in session {session.session_id}")
        total += 1
        if session.answers[i] != ht.trial.is_target:
            wrong += 1
    if total == 0:
        raise ValueError("no counted trials selected")
    return Fraction(wrong, total)


def aggregate_der(sessions: Iterable[HumanSession]) -> Fraction:
    """Total wrong / total counted across sessions (exact)."""
    wrong = 0
    total = 0
    for sess in sessions:
        for i, ht in enumerate(sess.trials):
            if not ht.counted:
                continue
            if i not in sess.answers:
                raise ValueError(f"trial {i} unanswered in session {sess.session_id}")
            total += 1
            if sess.answers[i] != ht.trial.is_target:
                wrong += 1
    if total == 0:
        raise ValueError("no counted trials")
    return Fraction(wrong, total)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_trials(path, trials) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in trials:
            tag = "target" if t.is_target else "nontarget"
            f.write(f"{t.utt_a}\t{t.utt_b}\t{tag}\n")


def read_trials(path, event: EventType | None = None) -> TrialList:
    trials = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise ValueError(f"{path}:{ln}: bad trial line")
            trials.append(Trial(parts[0], parts[1], parts[2] == "target", event=event))
    return TrialList(trials, event=event)


def write_scores(path, trials, scores) -> None:
    trials = list(trials)
    if len(trials) != len(scores):
        raise ValueError("trial/score length mismatch")
    with open(path, "w", encoding="utf-8") as f:
        for t, s in zip(trials, scores):
            f.write(f"{t.utt_a}\t{t.utt_b}\t{float(s)!r}\n")


def read_scores(path) -> list:
    """(utt_a, utt_b, score) triples."""
    out = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: bad score line")
            out.append((parts[0], parts[1], float(parts[2])))
    return out


def format_report(report: EvalReport, det_limit: int | None = None) -> str:
    lines = [
        f"eer\t{report.eer!r}",
        f"threshold_at_eer\t{report.threshold_at_eer!r}",
        f"n_target\t{report.n_target}",
        f"n_nontarget\t{report.n_nontarget}",
        "det\tthreshold\tfar\tfrr",
    ]
    points = report.det_points if det_limit is None else report.det_points[:det_limit]
    for t, fa, fr in points:
        lines.append(f"det\t{t!r}\t{fa!r}\t{fr!r}")
    return "\n".join(lines) + "\n"
