#!/usr/bin/env python3
"""Administer a scripted listening test and print its error report.

Builds a corpus with normal and disguised speech, creates a disguise
session (counted same-speaker pairs plus uncounted imposters), lets a
simulated listener answer every trial, and prints the decision error
rate the service computes.  The same service object backs the HTTP app
used by the browser client; here it is driven directly.

A second session shows how results pool across listeners.
"""

from pathlib import Path

import numpy as np

from tevkit.corpus import SynthSpec, synth_corpus
from tevkit.evaluation import aggregate_der
from tevkit.listensvc import ListenService, SessionConfig

OUT = Path("demo_out")


def run_listener(svc: ListenService, seed: int, flip_rate: float) -> str:
    """Answer a fresh session; flip_rate of the answers are wrong."""
    sid = svc.create_session(SessionConfig(protocol="disguise", per_event=6,
                                           imposter_noise=2, seed=seed))
    state = svc.sessions[sid]
    rng = np.random.default_rng(seed)
    for k, ht in enumerate(state.session.trials):
        truth = ht.trial.is_target
        answer = (not truth) if rng.random() < flip_rate else truth
        svc.submit_answer(sid, k, "same" if answer else "different")
    svc.finalize(sid)
    return sid


def main() -> None:
    spec = SynthSpec(n_speakers=4, utts_per_speaker_per_event=3,
                     events=("normal", "disguised"), seed=7)
    manifest = synth_corpus(spec, OUT / "disguise_corpus")
    print(f"corpus: {len(manifest)} utterances "
          f"(normal + disguised speech, {spec.n_speakers} speakers)")

    svc = ListenService(manifest, OUT / "sessions.jsonl")
    sids = [run_listener(svc, seed=s, flip_rate=r)
            for s, r in ((1, 0.25), (2, 0.10))]

    for sid in sids:
        rep = svc.report(sid)
        print(f"\nlistener {sid[:8]}: {rep['n_counted']} counted trials, "
              f"{rep['n_wrong']} wrong -> DER {rep['der']:.2%} "
              f"({rep['der_exact']})")

    pooled = aggregate_der([svc.sessions[s].session for s in sids])
    print(f"\npooled DER over {len(sids)} listeners: "
          f"{float(pooled):.2%} ({pooled.numerator}/{pooled.denominator})")
    svc.close()
    print(f"session log kept at {OUT / 'sessions.jsonl'} "
          f"(restarting the service replays it)")


if __name__ == "__main__":
    main()
