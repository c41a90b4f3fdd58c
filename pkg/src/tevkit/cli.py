"""Command-line driver wiring the pipeline end to end.

Every subcommand reads and writes the file formats its module defines
(manifest TSV, feature/stat archives, the model container, trial and
score text files).  With --deterministic and a fixed --seed, output
files are byte-identical across reruns; the effective configuration is
echoed next to each output artifact for provenance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import backend, corpus, dsp, evaluation, modelfile, pipeline, viz
from .corpus import EventType, SynthSpec, load_manifest, synth_corpus
from .embednet import FrameNet, FrameNetConfig
from .gmm import EmConfig, accumulate_stats, train_ubm
from .tvspace import SpeakerVector, extract_ivector, init_tmatrix, train_tmatrix

THREADS_ENV = "TEVKIT_THREADS"


def _apply_threads(n: int | None) -> None:
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        pass


def _echo_config(target, args: argparse.Namespace, sub: str) -> None:
    """Sidecar JSON with the effective settings, next to the artifact."""
    payload = {k: v for k, v in sorted(vars(args).items())
               if k not in ("func",) and v is not None}
    payload["subcommand"] = sub
    target = Path(target)
    dest = target / "config.json" if target.is_dir() else target.with_name(target.name + ".config.json")
    dest.write_text(json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n",
                    encoding="utf-8")


def _load_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _cfg(args: argparse.Namespace, group: str, key: str, default):
    """Priority: explicit flag > config file > default."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    return args.config_data.get(group, {}).get(key, default)


def _read_features(path) -> dict:
    tag, items = dsp.read_feature_archive(path)
    return {u: dsp.FeatureMatrix(v.astype(np.float64), label=tag or "features")
            for u, v in items.items()}


def _read_vectors(path) -> dict:
    tag, items = dsp.read_feature_archive(path)
    kind = tag if tag in ("ivector", "dvector") else "ivector"
    out = {}
    for u, v in items.items():
        if v.shape[0] != 1:
            raise ValueError(f"{path}: {u} holds {v.shape[0]} rows, expected a single vector")
        out[u] = SpeakerVector(v[0].astype(np.float64), kind=kind, utt_id=u)
    return out


def _labels_for(utt_ids, manifest) -> list:
    spk_of = {r.utt_id: r.spk_id for r in manifest.records}
    missing = [u for u in utt_ids if u not in spk_of]
    if missing:
        raise ValueError(f"utterances not in manifest: {missing[:5]}")
    return [spk_of[u] for u in utt_ids]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_corpus(args) -> int:
    events = tuple(EventType(e) for e in args.events.split(","))
    spec = SynthSpec(n_speakers=args.speakers,
                     utts_per_speaker_per_event=args.utts,
                     events=events,
                     duration_range_s=(args.dur_min, args.dur_max),
                     seed=args.seed or 0)
    manifest = synth_corpus(spec, args.out)
    print(f"wrote {len(manifest)} utterances to {args.out}")
    _echo_config(args.out, args, "synth-corpus")
    return 0


def cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest)
    print(corpus.format_stats(corpus.corpus_stats(manifest)))
    return 0


def cmd_extract_features(args) -> int:
    manifest = load_manifest(args.manifest)
    feats = pipeline.extract_features(manifest, args.kind)
    tag = next(iter(feats.values())).label
    dsp.write_feature_archive(args.out, {u: f.values for u, f in feats.items()}, tag=tag)
    print(f"wrote {len(feats)} matrices ({tag}) to {args.out}")
    _echo_config(args.out, args, "extract-features")
    return 0


def cmd_train_ubm(args) -> int:
    feats = _read_features(args.feats)
    cfg = EmConfig(n_components=args.components,
                   n_iters=_cfg(args, "gmm", "em-iters", 4),
                   seed=args.seed or 0)
    ubm = train_ubm([feats[u] for u in feats], cfg)
    modelfile.save_model(args.out, {"gmm": ubm})
    print(f"trained {ubm.n_components}-component UBM on {len(feats)} utterances")
    _echo_config(args.out, args, "train-ubm")
    return 0


def cmd_accumulate_stats(args) -> int:
    feats = _read_features(args.feats)
    ubm = modelfile.load_model(args.model, keys={"gmm"})["gmm"]
    items = [(u, accumulate_stats(ubm, feats[u], deterministic=args.deterministic))
             for u in feats]
    modelfile.save_stats(args.out, items)
    print(f"wrote statistics for {len(items)} utterances to {args.out}")
    _echo_config(args.out, args, "accumulate-stats")
    return 0


def cmd_train_tmatrix(args) -> int:
    ubm = modelfile.load_model(args.model, keys={"gmm"})["gmm"]
    stats = modelfile.load_stats(args.stats)
    tvm = init_tmatrix(ubm, args.rank, seed=args.seed or 0)
    tvm = train_tmatrix(tvm, [s for _, s in stats], n_iters=args.iters)
    modelfile.save_model(args.out, {"gmm": ubm, "tvm": tvm})
    print(f"trained rank-{tvm.rank} subspace on {len(stats)} utterances")
    _echo_config(args.out, args, "train-tmatrix")
    return 0


def cmd_extract_ivectors(args) -> int:
    loaded = modelfile.load_model(args.model, keys={"gmm", "tvm"})
    if "tvm" not in loaded:
        raise ValueError(f"{args.model} has no total-variability section")
    tvm = loaded["tvm"]
    stats = modelfile.load_stats(args.stats)
    vecs = {u: extract_ivector(tvm, s, utt_id=u).values for u, s in stats}
    dsp.write_feature_archive(args.out, vecs, tag="ivector")
    print(f"wrote {len(vecs)} i-vectors (dim {tvm.rank}) to {args.out}")
    _echo_config(args.out, args, "extract-ivectors")
    return 0


def cmd_train_dnn(args) -> int:
    feats = _read_features(args.feats)
    manifest = load_manifest(args.manifest)
    index = pipeline.speaker_index(manifest)
    cfg = FrameNetConfig(n_speakers=len(index),
                         input_dim=next(iter(feats.values())).values.shape[1],
                         feature_dim=args.feature_dim,
                         lr=args.lr, epochs=args.epochs,
                         batch_size=args.batch_size,
                         seed=args.seed or 0)
    net = pipeline.train_dvector_net(feats, manifest, cfg=cfg)
    modelfile.save_model(args.out, {"dnn": net})
    print(f"trained frame network ({net.n_params()} parameters, "
          f"{len(index)} speakers)")
    _echo_config(args.out, args, "train-dnn")
    return 0


def cmd_extract_dvectors(args) -> int:
    feats = _read_features(args.feats)
    net = modelfile.load_model(args.model, keys={"dnn"})["dnn"]
    vecs = pipeline.extract_dvectors(net, feats)
    dsp.write_feature_archive(args.out, {u: v.values for u, v in vecs.items()},
                              tag="dvector")
    print(f"wrote {len(vecs)} d-vectors to {args.out}")
    _echo_config(args.out, args, "extract-dvectors")
    return 0


def cmd_train_lda(args) -> int:
    vecs = _read_vectors(args.vectors)
    manifest = load_manifest(args.manifest)
    ids = list(vecs)
    mat = np.stack([vecs[u].values for u in ids])
    lda = backend.train_lda(mat, _labels_for(ids, manifest), args.dim)
    modelfile.save_model(args.out, {"lda": lda})
    print(f"trained LDA {mat.shape[1]} -> {lda.out_dim}")
    _echo_config(args.out, args, "train-lda")
    return 0


def cmd_train_plda(args) -> int:
    vecs = _read_vectors(args.vectors)
    manifest = load_manifest(args.manifest)
    ids = list(vecs)
    mat = np.stack([backend.length_normalize(vecs[u].values) for u in ids])
    model = backend.train_plda(mat, _labels_for(ids, manifest), n_iters=args.iters)
    modelfile.save_model(args.out, {"plda": model})
    print(f"trained PLDA (dim {model.dim}) on {mat.shape[0]} vectors")
    _echo_config(args.out, args, "train-plda")
    return 0


def cmd_gen_trials(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.human:
        trials = evaluation.gen_human_trials(manifest, per_event=args.per_event,
                                             p_target=args.p_target,
                                             seed=args.seed or 0)
    else:
        if not args.event:
            raise ValueError("--event is required unless --human")
        trials = evaluation.gen_exhaustive_trials(manifest, EventType(args.event))
    evaluation.write_trials(args.out, trials)
    print(f"wrote {len(trials)} trials ({trials.n_target} target)")
    _echo_config(args.out, args, "gen-trials")
    return 0


def cmd_score(args) -> int:
    vecs = _read_vectors(args.vectors)
    trials = evaluation.read_trials(args.trials)
    method = backend.ScoringMethod(args.method)
    lda = plda = None
    if method is not backend.ScoringMethod.COSINE and not args.model:
        raise ValueError(f"--model is required for {method.value} scoring")
    if method is backend.ScoringMethod.LDA_COSINE:
        lda = modelfile.load_model(args.model, keys={"lda"})["lda"]
    elif method is backend.ScoringMethod.PLDA:
        plda = modelfile.load_model(args.model, keys={"plda"})["plda"]
    scores = evaluation.score_trials(trials, vecs, method, lda=lda, plda=plda)
    evaluation.write_scores(args.out, trials, scores)
    print(f"scored {len(scores)} trials with {method.value}")
    _echo_config(args.out, args, "score")
    return 0


def cmd_eval_eer(args) -> int:
    trials = evaluation.read_trials(args.trials)
    rows = evaluation.read_scores(args.scores)
    if len(rows) != len(trials):
        raise ValueError("score/trial line counts differ")
    for t, (a, b, _) in zip(trials, rows):
        if (t.utt_a, t.utt_b) != (a, b):
            raise ValueError(f"score file out of step at pair ({a}, {b})")
    report = evaluation.compute_eer(np.array([r[2] for r in rows]),
                                    np.array([t.is_target for t in trials]))
    print(f"eer {report.eer:.4f}")
    print(f"threshold {report.threshold_at_eer:.6f}")
    if args.out:
        Path(args.out).write_text(evaluation.format_report(report), encoding="utf-8")
        _echo_config(args.out, args, "eval-eer")
    return 0


def cmd_tsne_export(args) -> int:
    vecs = _read_vectors(args.vectors)
    manifest = load_manifest(args.manifest)
    meta_of = {r.utt_id: (r.spk_id, r.event.value) for r in manifest.records}
    ids = [u for u in vecs if u in meta_of]
    if not ids:
        raise ValueError("no archive utterances found in the manifest")
    points = np.stack([vecs[u].values for u in ids])
    proj = viz.tsne(points, perplexity=args.perplexity, iters=args.iters,
                    seed=args.seed or 0)
    meta = {"perplexity": args.perplexity, "iters": args.iters,
            "seed": args.seed or 0, "n_points": len(ids)}
    viz.export_plot_data(args.out, proj, [meta_of[u] for u in ids], meta=meta)
    print(f"wrote {len(ids)} projected points to {args.out}")
    _echo_config(args.out, args, "tsne-export")
    return 0


def cmd_serve_listen(args) -> int:
    import uvicorn

    from .listensvc import create_app
    app = create_app(manifest_path=args.manifest, log_path=args.log)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tevkit",
                                description="speaker verification on trivial vocal events")
    p.add_argument("--config", help="JSON config file with parameter groups")
    p.add_argument("--seed", type=int, default=None, help="global random seed")
    p.add_argument("--deterministic", action="store_true",
                   help="bit-reproducible reductions where applicable")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get(THREADS_ENV, "0")) or None,
                   help=f"worker thread cap (default ${THREADS_ENV})")
    sub = p.add_subparsers(dest="subcommand", required=True)

    def add(name, fn, **arguments):
        sp = sub.add_parser(name)
        for flag, kw in arguments.items():
            sp.add_argument(f"--{flag.replace('_', '-')}", **kw)
        sp.set_defaults(func=fn)
        return sp

    add("synth-corpus", cmd_synth_corpus,
        out={"required": True}, speakers={"type": int, "default": 20},
        utts={"type": int, "default": 10},
        events={"default": "cough,laugh,hmm,tsk,ahem,sniff"},
        dur_min={"type": float, "default": 0.3},
        dur_max={"type": float, "default": 0.5})
    add("stats", cmd_stats, manifest={"required": True})
    add("extract-features", cmd_extract_features,
        manifest={"required": True},
        kind={"required": True, "choices": ["ivector", "dvector"]},
        out={"required": True})
    add("train-ubm", cmd_train_ubm,
        feats={"required": True}, components={"type": int, "required": True},
        em_iters={"type": int, "default": None}, out={"required": True})
    add("accumulate-stats", cmd_accumulate_stats,
        feats={"required": True}, model={"required": True}, out={"required": True})
    add("train-tmatrix", cmd_train_tmatrix,
        stats={"required": True}, model={"required": True},
        rank={"type": int, "required": True}, iters={"type": int, "default": 5},
        out={"required": True})
    add("extract-ivectors", cmd_extract_ivectors,
        stats={"required": True}, model={"required": True}, out={"required": True})
    add("train-dnn", cmd_train_dnn,
        feats={"required": True}, manifest={"required": True},
        feature_dim={"type": int, "default": 16},
        epochs={"type": int, "default": 20}, lr={"type": float, "default": 0.01},
        batch_size={"type": int, "default": 8}, out={"required": True})
    add("extract-dvectors", cmd_extract_dvectors,
        feats={"required": True}, model={"required": True}, out={"required": True})
    add("train-lda", cmd_train_lda,
        vectors={"required": True}, manifest={"required": True},
        dim={"type": int, "required": True}, out={"required": True})
    add("train-plda", cmd_train_plda,
        vectors={"required": True}, manifest={"required": True},
        iters={"type": int, "default": 10}, out={"required": True})
    add("gen-trials", cmd_gen_trials,
        manifest={"required": True}, event={"default": None},
        human={"action": "store_true"},
        per_event={"type": int, "default": 6},
        p_target={"type": float, "default": 0.5}, out={"required": True})
    add("score", cmd_score,
        vectors={"required": True}, trials={"required": True},
        method={"required": True,
                "choices": [m.value for m in backend.ScoringMethod]},
        model={"default": None}, out={"required": True})
    add("eval-eer", cmd_eval_eer,
        scores={"required": True}, trials={"required": True},
        out={"default": None})
    add("tsne-export", cmd_tsne_export,
        vectors={"required": True}, manifest={"required": True},
        perplexity={"type": float, "default": 30.0},
        iters={"type": int, "default": 1000}, out={"required": True})
    add("serve-listen", cmd_serve_listen,
        manifest={"required": True}, log={"required": True},
        host={"default": "127.0.0.1"}, port={"type": int, "default": 8321})
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.config_data = _load_config(args.config)
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
