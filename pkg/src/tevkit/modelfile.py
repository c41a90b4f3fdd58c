"""Single-file model container and sufficient-statistics archive.

Model container layout: magic "TEVM", u32 format version, then tagged
sections.  Each section is a 4-byte tag ("GMM ", "TVM ", "DNN ",
"LDA ", "PLDA"), a u64 payload length, and the payload.  Array
payloads are 32-bit little-endian floats; sections can be loaded
selectively by tag.

Statistics archive: magic "TEVS", u32 version, model shape, then one
record per utterance.  Stats stay float64 because they feed further
estimation.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .backend import LdaTransform, PldaModel
from .embednet import FrameNet, FrameNetConfig
from .gmm import BaumWelchStats, DiagGmm
from .tvspace import TotalVariabilityModel

MODEL_MAGIC = b"TEVM"
STATS_MAGIC = b"TEVS"
FORMAT_VERSION = 1
SECTION_ORDER = (b"GMM ", b"TVM ", b"DNN ", b"LDA ", b"PLDA")
_TAG_BY_KEY = {"gmm": b"GMM ", "tvm": b"TVM ", "dnn": b"DNN ",
               "lda": b"LDA ", "plda": b"PLDA"}
_KEY_BY_TAG = {v: k for k, v in _TAG_BY_KEY.items()}


class ModelFileError(Exception):
    pass


def _write_f32(buf, arr) -> None:
    a = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<I", a.ndim))
    for d in a.shape:
        buf.write(struct.pack("<I", d))
    buf.write(a.tobytes())


def _read_f32(buf) -> np.ndarray:
    (ndim,) = struct.unpack("<I", _take(buf, 4))
    shape = tuple(struct.unpack("<I", _take(buf, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_take(buf, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float64)


def _take(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise ModelFileError("truncated file")
    return b


# ---------------------------------------------------------------------------
# per-kind payloads
# ---------------------------------------------------------------------------

def _gmm_payload(gmm: DiagGmm) -> bytes:
    buf = io.BytesIO()
    _write_f32(buf, gmm.weights)
    _write_f32(buf, gmm.means)
    _write_f32(buf, gmm.variances)
    return buf.getvalue()


def _gmm_parse(payload: bytes) -> DiagGmm:
    buf = io.BytesIO(payload)
    weights = _read_f32(buf)
    means = _read_f32(buf)
    variances = _read_f32(buf)
    # float32 storage perturbs the simplex; renormalize on load
    weights = weights / weights.sum()
    return DiagGmm(weights=weights, means=means, variances=variances)


def _tvm_payload(model: TotalVariabilityModel) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<III", model.ubm.n_components, model.ubm.dim, model.rank))
    _write_f32(buf, model.T)
    return buf.getvalue()


def _tvm_parse(payload: bytes, ubm: DiagGmm) -> TotalVariabilityModel:
    buf = io.BytesIO(payload)
    c, d, r = struct.unpack("<III", _take(buf, 12))
    t = _read_f32(buf)
    if t.shape != (c * d, r):
        raise ModelFileError("total-variability matrix shape mismatch")
    return TotalVariabilityModel(T=t, ubm=ubm)


def _dnn_payload(net: FrameNet) -> bytes:
    cfg = net.cfg
    header = json.dumps({
        "n_speakers": cfg.n_speakers,
        "input_dim": cfg.input_dim,
        "input_time": cfg.input_time,
        "input_freq": cfg.input_freq,
        "conv_blocks": [list(b) for b in cfg.conv_blocks],
        "tdnn_layers": [[list(offs), units] for offs, units in cfg.tdnn_layers],
        "feature_dim": cfg.feature_dim,
    }, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for layer in net.layers():
        for _, value, _ in layer.params():
            _write_f32(buf, value)
    return buf.getvalue()


def _dnn_parse(payload: bytes) -> FrameNet:
    buf = io.BytesIO(payload)
    (hlen,) = struct.unpack("<I", _take(buf, 4))
    header = json.loads(_take(buf, hlen).decode())
    cfg = FrameNetConfig(
        n_speakers=header["n_speakers"],
        input_dim=header["input_dim"],
        input_time=header["input_time"],
        input_freq=header["input_freq"],
        conv_blocks=tuple(tuple(b) for b in header["conv_blocks"]),
        tdnn_layers=tuple((tuple(offs), units) for offs, units in header["tdnn_layers"]),
        feature_dim=header["feature_dim"],
    )
    net = FrameNet(cfg)
    for layer in net.layers():
        for name, value, _ in layer.params():
            loaded = _read_f32(buf)
            if loaded.shape != value.shape:
                raise ModelFileError(f"stored {name} has shape {loaded.shape}, "
                                     f"expected {value.shape}")
            value[...] = loaded
    return net


def _lda_payload(lda: LdaTransform) -> bytes:
    buf = io.BytesIO()
    _write_f32(buf, lda.mean)
    _write_f32(buf, lda.projection)
    return buf.getvalue()


def _lda_parse(payload: bytes) -> LdaTransform:
    buf = io.BytesIO(payload)
    mean = _read_f32(buf)
    projection = _read_f32(buf)
    return LdaTransform(projection=projection, mean=mean)


def _plda_payload(plda: PldaModel) -> bytes:
    buf = io.BytesIO()
    _write_f32(buf, plda.mu)
    _write_f32(buf, plda.between_cov)
    _write_f32(buf, plda.within_cov)
    return buf.getvalue()


def _plda_parse(payload: bytes) -> PldaModel:
    buf = io.BytesIO(payload)
    mu = _read_f32(buf)
    between = _read_f32(buf)
    within = _read_f32(buf)
    return PldaModel(mu=mu, between_cov=between, within_cov=within)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

def save_model(path, sections: dict) -> None:
    """Write sections (keys among gmm/tvm/dnn/lda/plda) in canonical order."""
    unknown = set(sections) - set(_TAG_BY_KEY)
    if unknown:
        raise ModelFileError(f"unknown section keys {sorted(unknown)}")
    encoders = {"gmm": _gmm_payload, "tvm": _tvm_payload, "dnn": _dnn_payload,
                "lda": _lda_payload, "plda": _plda_payload}
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        for tag in SECTION_ORDER:
            key = _KEY_BY_TAG[tag]
            if key not in sections:
                continue
            payload = encoders[key](sections[key])
            f.write(tag)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def load_model(path, keys: set | None = None) -> dict:
    """Read requested sections (all by default); others are skipped."""
    wanted = set(_TAG_BY_KEY) if keys is None else set(keys)
    unknown = wanted - set(_TAG_BY_KEY)
    if unknown:
        raise ModelFileError(f"unknown section keys {sorted(unknown)}")
    payloads = {}
    with open(path, "rb") as f:
        if f.read(4) != MODEL_MAGIC:
            raise ModelFileError(f"{path}: not a model container")
        (version,) = struct.unpack("<I", _take(f, 4))
        if version != FORMAT_VERSION:
            raise ModelFileError(f"unsupported format version {version}")
        while True:
            tag = f.read(4)
            if not tag:
                break
            if len(tag) != 4 or tag not in _KEY_BY_TAG:
                raise ModelFileError(f"unknown section tag {tag!r}")
            (length,) = struct.unpack("<Q", _take(f, 8))
            key = _KEY_BY_TAG[tag]
            if key in wanted:
                payloads[key] = _take(f, length)
            else:
                f.seek(length, 1)

    out = {}
    if "gmm" in payloads:
        out["gmm"] = _gmm_parse(payloads["gmm"])
    if "tvm" in payloads:
        if "gmm" not in out:
            raise ModelFileError("TVM section requires the GMM section")
        out["tvm"] = _tvm_parse(payloads["tvm"], out["gmm"])
    if "dnn" in payloads:
        out["dnn"] = _dnn_parse(payloads["dnn"])
    if "lda" in payloads:
        out["lda"] = _lda_parse(payloads["lda"])
    if "plda" in payloads:
        out["plda"] = _plda_parse(payloads["plda"])
    return out


# ---------------------------------------------------------------------------
# statistics archive
# ---------------------------------------------------------------------------

def save_stats(path, items) -> None:
    """items: iterable of (utt_id, BaumWelchStats); float64 payloads."""
    with open(path, "wb") as f:
        f.write(STATS_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        for utt_id, st in items:
            uid = utt_id.encode()
            c, d = st.first.shape
            f.write(struct.pack("<H", len(uid)))
            f.write(uid)
            f.write(struct.pack("<IIQ", c, d, int(st.n_frames)))
            f.write(np.ascontiguousarray(st.zeroth, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(st.first, dtype="<f8").tobytes())


def load_stats(path) -> list:
    """[(utt_id, BaumWelchStats)] in file order."""
    out = []
    with open(path, "rb") as f:
        if f.read(4) != STATS_MAGIC:
            raise ModelFileError(f"{path}: not a statistics archive")
        (version,) = struct.unpack("<I", _take(f, 4))
        if version != FORMAT_VERSION:
            raise ModelFileError(f"unsupported format version {version}")
        while True:
            head = f.read(2)
            if not head:
                break
            (ulen,) = struct.unpack("<H", head)
            utt_id = _take(f, ulen).decode()
            c, d, n_frames = struct.unpack("<IIQ", _take(f, 16))
            zeroth = np.frombuffer(_take(f, 8 * c), dtype="<f8").copy()
            first = np.frombuffer(_take(f, 8 * c * d), dtype="<f8").copy().reshape(c, d)
            out.append((utt_id, BaumWelchStats(zeroth=zeroth, first=first,
                                               n_frames=n_frames)))
    return out
