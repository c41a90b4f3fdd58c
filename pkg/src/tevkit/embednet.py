"""Frame-level speaker feature learner and d-vector derivation.

The network maps spliced filterbank rows (context x mel bins, flattened)
to per-frame speaker features.  Structure: convolution blocks over the
(context, frequency) plane of each input row, then time-delay layers
that splice hidden activations across neighboring utterance frames,
then an affine bottleneck whose post-ReLU activations are the frame
features, and a softmax classification layer over training speakers.
The d-vector of an utterance is the arithmetic mean of its frame
features.

Everything is plain numpy with hand-written backward passes;
``grad_check`` validates them against central finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dsp import FeatureMatrix
from .tvspace import SpeakerVector

logger = logging.getLogger(__name__)


class TrainingDiverged(Exception):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite at epoch {epoch}")


@dataclass
class FrameNetConfig:
    n_speakers: int
    input_dim: int = 360
    input_time: int = 9          # context frames per input row
    input_freq: int = 40         # mel bins per context frame
    # (out_channels, time_kernel, freq_kernel, freq_pool) per block
    conv_blocks: tuple = ((16, 4, 8, 2), (16, 3, 4, 2))
    # (splice offsets, units) per time-delay layer
    tdnn_layers: tuple = (((-2, 0, 2), 64), ((-4, 0, 4), 32))
    feature_dim: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8          # utterances per SGD step
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.conv_blocks and self.input_time * self.input_freq != self.input_dim:
            raise ValueError("input_dim must equal input_time * input_freq")
        # shape propagation sanity check
        self.flat_dim()

    def flat_dim(self) -> int:
        """Dimensionality after the conv stack, fed to the first TDNN layer."""
        if not self.conv_blocks:
            return self.input_dim
        t, f, c = self.input_time, self.input_freq, 1
        for out_c, kt, kf, pool in self.conv_blocks:
            t, f = t - kt + 1, f - kf + 1
            if t < 1 or f < 1:
                raise ValueError("conv kernel larger than its input plane")
            if pool > 1:
                f = f // pool
                if f < 1:
                    raise ValueError("pooling shrinks the frequency axis to nothing")
            c = out_c
        return t * f * c


class _ConvBlock:
    """Valid 2-D convolution + bias + ReLU + max-pool along frequency."""

    def __init__(self, in_c, out_c, kt, kf, pool, rng):
        fan_in = in_c * kt * kf
        self.w = rng.standard_normal((kt, kf, in_c, out_c)) * np.sqrt(2.0 / fan_in)
        self.b = np.zeros(out_c)
        self.kt, self.kf, self.pool = kt, kf, pool
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [("w", self.w, self.dw), ("b", self.b, self.db)]

    def _im2col(self, x):
        n, t, f, c = x.shape
        t2, f2 = t - self.kt + 1, f - self.kf + 1
        cols = np.empty((n, t2, f2, self.kt, self.kf, c))
        for dt in range(self.kt):
            for df in range(self.kf):
                cols[:, :, :, dt, df, :] = x[:, dt:dt + t2, df:df + f2, :]
        return cols

    def forward(self, x):
        self.x_shape = x.shape
        self.cols = self._im2col(x)
        pre = np.tensordot(self.cols, self.w, axes=([3, 4, 5], [0, 1, 2])) + self.b
        self.relu_mask = pre > 0
        act = pre * self.relu_mask
        if self.pool > 1:
            n, t2, f2, c = act.shape
            f_keep = (f2 // self.pool) * self.pool
            grouped = act[:, :, :f_keep, :].reshape(n, t2, f2 // self.pool, self.pool, c)
            self.argmax = grouped.argmax(axis=3)
            self.f2 = f2
            out = np.take_along_axis(grouped, self.argmax[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        else:
            out = act
        return out

    def backward(self, dy):
        if self.pool > 1:
            n, t2, fp, c = dy.shape
            dgrouped = np.zeros((n, t2, fp, self.pool, c))
            np.put_along_axis(dgrouped, self.argmax[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
            dact = np.zeros((n, t2, self.f2, c))
            dact[:, :, :fp * self.pool, :] = dgrouped.reshape(n, t2, fp * self.pool, c)
        else:
            dact = dy
        dpre = dact * self.relu_mask
        self.dw += np.tensordot(self.cols, dpre, axes=([0, 1, 2], [0, 1, 2]))
        self.db += dpre.sum(axis=(0, 1, 2))
        dcols = np.tensordot(dpre, self.w, axes=([3], [3]))   # (n,t2,f2,kt,kf,cin)
        dx = np.zeros(self.x_shape)
        t2, f2 = dpre.shape[1], dpre.shape[2]
        for dt in range(self.kt):
            for df in range(self.kf):
                dx[:, dt:dt + t2, df:df + f2, :] += dcols[:, :, :, dt, df, :]
        return dx


class _TdnnLayer:
    """Splice activations across utterance frames (edges replicated),
    then affine + optional ReLU."""

    def __init__(self, offsets, in_dim, out_dim, rng, relu=True, w_scale=None):
        self.offsets = tuple(offsets)
        fan_in = in_dim * len(self.offsets)
        scale = w_scale if w_scale is not None else np.sqrt(2.0 / fan_in)
        self.w = rng.standard_normal((fan_in, out_dim)) * scale
        self.b = np.zeros(out_dim)
        self.in_dim = in_dim
        self.relu = relu
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [("w", self.w, self.dw), ("b", self.b, self.db)]

    def forward(self, x):
        n = x.shape[0]
        self.n = n
        self.idx = [np.clip(np.arange(n) + off, 0, n - 1) for off in self.offsets]
        self.spliced = np.hstack([x[idx] for idx in self.idx])
        pre = self.spliced @ self.w + self.b
        if self.relu:
            self.mask = pre > 0
            return pre * self.mask
        return pre

    def backward(self, dy):
        dpre = dy * self.mask if self.relu else dy
        self.dw += self.spliced.T @ dpre
        self.db += dpre.sum(axis=0)
        dspliced = dpre @ self.w.T
        dx = np.zeros((self.n, self.in_dim))
        for j, idx in enumerate(self.idx):
            np.add.at(dx, idx, dspliced[:, j * self.in_dim:(j + 1) * self.in_dim])
        return dx


class FrameNet:
    """The network: parameters plus forward/backward machinery."""

    def __init__(self, cfg: FrameNetConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.conv = []
        in_c = 1
        for out_c, kt, kf, pool in cfg.conv_blocks:
            self.conv.append(_ConvBlock(in_c, out_c, kt, kf, pool, rng))
            in_c = out_c
        dim = cfg.flat_dim()
        self.tdnn = []
        for offsets, units in cfg.tdnn_layers:
            self.tdnn.append(_TdnnLayer(offsets, dim, units, rng))
            dim = units
        self.feature_layer = _TdnnLayer((0,), dim, cfg.feature_dim, rng)
        # small output weights: initial predictions near-uniform
        self.output_layer = _TdnnLayer((0,), cfg.feature_dim, cfg.n_speakers,
                                       rng, relu=False, w_scale=0.01)

    def layers(self):
        return [*self.conv, *self.tdnn, self.feature_layer, self.output_layer]

    def params(self):
        for li, layer in enumerate(self.layers()):
            for name, value, grad in layer.params():
                yield f"layer{li}.{name}", value, grad

    def n_params(self) -> int:
        return sum(v.size for _, v, _ in self.params())

    def zero_grads(self):
        for _, _, grad in self.params():
            grad[...] = 0.0

    def _forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ValueError(f"input must be (n, {self.cfg.input_dim})")
        h = x
        if self.conv:
            h = h.reshape(-1, self.cfg.input_time, self.cfg.input_freq, 1)
            for block in self.conv:
                h = block.forward(h)
            h = h.reshape(h.shape[0], -1)
        for layer in self.tdnn:
            h = layer.forward(h)
        feats = self.feature_layer.forward(h)
        logits = self.output_layer.forward(feats)
        return feats, logits

    def _backward(self, dlogits: np.ndarray):
        dh = self.output_layer.backward(dlogits)
        dh = self.feature_layer.backward(dh)
        for layer in reversed(self.tdnn):
            dh = layer.backward(dh)
        if self.conv:
            # recover the spatial shape the last block produced
            n = dh.shape[0]
            last = self.conv[-1]
            t2 = last.relu_mask.shape[1]
            c = last.relu_mask.shape[3]
            f_out = dh.shape[1] // (t2 * c)
            dh = dh.reshape(n, t2, f_out, c)
            for block in reversed(self.conv):
                dh = block.backward(dh)


def forward(net: FrameNet, frames) -> tuple[np.ndarray, np.ndarray]:
    """Frame features (post-ReLU bottleneck) and pre-softmax logits."""
    x = frames.values if isinstance(frames, FeatureMatrix) else np.asarray(frames, dtype=np.float64)
    return net._forward(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(len(labels)), labels]))


def _loss_and_backward(net: FrameNet, x: np.ndarray, labels: np.ndarray) -> float:
    """Sum-of-frame-CE loss; accumulates gradients of the SUM into the net."""
    _, logits = net._forward(x)
    probs = softmax(logits)
    n = x.shape[0]
    loss_sum = cross_entropy(logits, labels) * n
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    net._backward(dlogits)
    return loss_sum


def train(net: FrameNet, utterances, cfg: FrameNetConfig | None = None) -> FrameNet:
    """Minibatch SGD with momentum on frame-level cross-entropy.

    ``utterances`` is a sequence of (features, speaker_index) pairs; each
    utterance's frames form one contiguous sequence for the time-delay
    layers and share the utterance's label.
    """
    cfg = cfg or net.cfg
    data = [(f.values if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64), int(lab))
            for f, lab in utterances]
    labels_present = {lab for _, lab in data}
    if len(labels_present) < 2:
        raise ValueError("training needs at least 2 distinct speakers")
    if max(labels_present) >= cfg.n_speakers or min(labels_present) < 0:
        raise ValueError("label out of range")

    rng = np.random.default_rng(cfg.seed + 1)
    velocity = {name: np.zeros_like(v) for name, v, _ in net.params()}
    lr = cfg.lr
    prev_loss = np.inf
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total_loss = 0.0
        total_frames = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            net.zero_grads()
            batch_loss = 0.0
            batch_frames = 0
            for i in batch:
                x, lab = data[i]
                batch_loss += _loss_and_backward(net, x, np.full(x.shape[0], lab))
                batch_frames += x.shape[0]
            for name, value, grad in net.params():
                v = velocity[name]
                v *= cfg.momentum
                v -= lr * grad / batch_frames
                value += v
            total_loss += batch_loss
            total_frames += batch_frames
        epoch_loss = total_loss / total_frames
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(epoch)
        logger.info("epoch %d: loss %.4f (lr %.5f)", epoch, epoch_loss, lr)
        if epoch_loss >= prev_loss:
            lr *= 0.5
        prev_loss = epoch_loss
    return net


def frame_accuracy(net: FrameNet, utterances) -> float:
    correct = 0
    total = 0
    for f, lab in utterances:
        _, logits = forward(net, f)
        correct += int(np.sum(logits.argmax(axis=1) == lab))
        total += logits.shape[0]
    return correct / total


def dvector(net: FrameNet, frames, utt_id: str = "") -> SpeakerVector:
    """Average the frame-level features of one utterance."""
    feats, _ = forward(net, frames)
    if feats.shape[0] < 1:
        raise ValueError("empty utterance")
    return SpeakerVector(feats.mean(axis=0), kind="dvector", utt_id=utt_id)


def grad_check(net: FrameNet, batch, n_samples: int = 120, eps: float = 1e-4,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Only meant for tiny nets; the loss is re-evaluated twice per sampled
    parameter.
    """
    x, labels = batch
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if net.n_params() > 5000:
        raise ValueError("grad_check requires a tiny net (<= 5000 parameters)")

    n = x.shape[0]
    net.zero_grads()
    _loss_and_backward(net, x, labels)
    params = list(net.params())
    analytic = {name: grad / n for name, _, grad in params}

    def loss() -> float:
        _, logits = net._forward(x)
        return cross_entropy(logits, labels)

    rng = np.random.default_rng(seed)
    sizes = [v.size for _, v, _ in params]
    total = sum(sizes)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat_idx in picks:
        pi = int(np.searchsorted(bounds, flat_idx, side="right"))
        local = flat_idx - (bounds[pi - 1] if pi > 0 else 0)
        name, value, _ = params[pi]
        idx = np.unravel_index(local, value.shape)
        orig = value[idx]
        value[idx] = orig + eps
        up = loss()
        value[idx] = orig - eps
        down = loss()
        value[idx] = orig
        numeric = (up - down) / (2.0 * eps)
        a = analytic[name][idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst
