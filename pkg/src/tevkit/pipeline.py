"""End-to-end recipes: audio -> features -> models -> utterance vectors.

Two parallel systems share the corpus and the evaluation harness:

* generative: MFCC+energy+deltas, a diagonal UBM, Baum-Welch statistics,
  a total-variability subspace, i-vectors;
* discriminative: spliced log filterbanks, the frame-level network,
  d-vectors by frame-feature averaging.
"""

from __future__ import annotations

import logging

import numpy as np

from .corpus import CorpusManifest, read_wav
from .dsp import (FBANK_CONFIG, MFCC_CONFIG, FeatureMatrix, add_deltas, cmvn,
                  fbank, mfcc, splice)
from .embednet import FrameNet, FrameNetConfig, dvector
from .embednet import train as train_net
from .gmm import DiagGmm, EmConfig, accumulate_stats, train_ubm
from .tvspace import (TotalVariabilityModel, extract_ivector, init_tmatrix,
                      train_tmatrix)

logger = logging.getLogger(__name__)

IVECTOR_FEATURE_TAG = "mfcc19+e+d2:60"
DVECTOR_FEATURE_TAG = "fbank40x9:360"


def ivector_frontend(seg) -> FeatureMatrix:
    """19 cepstra + log energy, normalized per utterance, with first and
    second derivatives (60 dims)."""
    return add_deltas(cmvn(mfcc(seg, MFCC_CONFIG)), order=2)


def dvector_frontend(seg) -> FeatureMatrix:
    """40 log filterbanks, per-utterance CMVN, spliced +-4 frames (360 dims)."""
    return splice(cmvn(fbank(seg, FBANK_CONFIG)), left=4, right=4)


_FRONTENDS = {"ivector": ivector_frontend, "dvector": dvector_frontend}


def extract_features(manifest: CorpusManifest, kind: str) -> dict:
    """utt_id -> FeatureMatrix for every utterance in the manifest."""
    if kind not in _FRONTENDS:
        raise ValueError(f"unknown feature kind {kind!r} (ivector|dvector)")
    frontend = _FRONTENDS[kind]
    out = {}
    for rec in manifest.records:
        seg = read_wav(manifest.audio_path(rec))
        out[rec.utt_id] = frontend(seg)
    return out


def speaker_index(manifest: CorpusManifest) -> dict:
    """Stable spk_id -> small-integer mapping (sorted order)."""
    return {s: i for i, s in enumerate(sorted({u.spk_id for u in manifest.records}))}


# ---------------------------------------------------------------------------
# generative system
# ---------------------------------------------------------------------------

def train_ivector_extractor(features: dict, n_components: int, rank: int,
                            em_iters: int = 4, tv_iters: int = 5, seed: int = 0,
                            deterministic: bool = False):
    """(ubm, tv model, per-utterance stats) from pooled training features."""
    mats = [features[u] for u in sorted(features)]
    ubm = train_ubm(mats, EmConfig(n_components=n_components, n_iters=em_iters,
                                   seed=seed))
    stats = {u: accumulate_stats(ubm, features[u], deterministic=deterministic)
             for u in sorted(features)}
    tvm = init_tmatrix(ubm, rank, seed=seed)
    tvm = train_tmatrix(tvm, [stats[u] for u in sorted(stats)], n_iters=tv_iters)
    return ubm, tvm, stats


def extract_ivectors(tvm: TotalVariabilityModel, stats: dict) -> dict:
    return {u: extract_ivector(tvm, st, utt_id=u) for u, st in stats.items()}


def ivectors_from_features(tvm: TotalVariabilityModel, features: dict,
                           deterministic: bool = False) -> dict:
    return {u: extract_ivector(tvm, accumulate_stats(tvm.ubm, f, deterministic),
                               utt_id=u)
            for u, f in features.items()}


# ---------------------------------------------------------------------------
# discriminative system
# ---------------------------------------------------------------------------

def train_dvector_net(features: dict, manifest: CorpusManifest,
                      cfg: FrameNetConfig | None = None, **overrides) -> FrameNet:
    """Train the frame classifier on every utterance in the manifest."""
    spk_of = {u.utt_id: u.spk_id for u in manifest.records}
    index = speaker_index(manifest)
    if cfg is None:
        cfg = FrameNetConfig(n_speakers=len(index), **overrides)
    elif overrides:
        raise ValueError("pass either cfg or overrides, not both")
    data = [(features[u], index[spk_of[u]]) for u in sorted(features)]
    net = FrameNet(cfg)
    return train_net(net, data, cfg)


def extract_dvectors(net: FrameNet, features: dict) -> dict:
    return {u: dvector(net, f, utt_id=u) for u, f in features.items()}
