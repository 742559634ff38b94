"""Convolutional flow classifier: forward pass, losses, gradients, Adam.

The network reads a flattened 100x200 flow as a 20000-long byte
sequence: a 1-D convolution slides over it, a global max pool keeps
the strongest response per channel, one hidden layer with ReLU6 feeds
a linear output layer with one unit per known class.  The output layer
activations (before any squashing) are the signature used for novelty
clustering; training can pull them toward per-class centroids.

Everything is plain numpy and dtype preserving: float32 in production,
float64 when a test wants tight finite-difference agreement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, TrainingError

PARAM_ORDER = ("conv_w", "conv_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")

HEAD_SIGMOID = "sigmoid_1vr"
HEAD_SOFTMAX = "softmax"
HEADS = (HEAD_SIGMOID, HEAD_SOFTMAX)


@dataclass(frozen=True)
class Architecture:
    """Static shape of the network."""

    input_dim: int = 20000
    conv_width: int = 20
    conv_channels: int = 10
    conv_stride: int = 10
    fc1_units: int = 500
    n_classes: int = 4

    def __post_init__(self):
        if self.input_dim < self.conv_width:
            raise ConfigError("input shorter than the convolution filter")
        if self.conv_stride < 1:
            raise ConfigError("conv_stride must be >= 1")
        if self.n_classes < 1:
            raise ConfigError("need at least one class")

    @property
    def conv_positions(self) -> int:
        return (self.input_dim - self.conv_width) // self.conv_stride + 1

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "conv_width": self.conv_width,
                "conv_channels": self.conv_channels,
                "conv_stride": self.conv_stride,
                "fc1_units": self.fc1_units, "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


@dataclass
class ModelParams:
    """All trainable arrays plus the seed they were drawn from."""

    conv_w: np.ndarray   # (conv_width, conv_channels)
    conv_b: np.ndarray   # (conv_channels,)
    fc1_w: np.ndarray    # (conv_channels, fc1_units)
    fc1_b: np.ndarray    # (fc1_units,)
    fc2_w: np.ndarray    # (fc1_units, n_classes)
    fc2_b: np.ndarray    # (n_classes,)
    rng_seed: int = 0

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_ORDER]

    def copy(self) -> "ModelParams":
        return ModelParams(*[a.copy() for a in self.arrays()],
                           rng_seed=self.rng_seed)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(*[a.astype(dtype) for a in self.arrays()],
                           rng_seed=self.rng_seed)


def init_params(arch: Architecture, seed: int,
                dtype=np.float32) -> ModelParams:
    """Uniform fan-in scaled initialization, biases at zero."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    return ModelParams(
        conv_w=uniform((arch.conv_width, arch.conv_channels), arch.conv_width),
        conv_b=np.zeros(arch.conv_channels, dtype=dtype),
        fc1_w=uniform((arch.conv_channels, arch.fc1_units), arch.conv_channels),
        fc1_b=np.zeros(arch.fc1_units, dtype=dtype),
        fc2_w=uniform((arch.fc1_units, arch.n_classes), arch.fc1_units),
        fc2_b=np.zeros(arch.n_classes, dtype=dtype),
        rng_seed=seed,
    )


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 6.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to stay finite for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    """Intermediates needed by the backward pass."""

    x: np.ndarray          # (n, input_dim)
    windows: np.ndarray    # (n, positions, conv_width)
    argmax: np.ndarray     # (n, channels) winning position per channel
    pooled: np.ndarray     # (n, channels)
    fc1_pre: np.ndarray    # (n, fc1_units)
    fc1_out: np.ndarray    # (n, fc1_units)
    logits: np.ndarray     # (n, n_classes) output layer, no squashing


def _as_matrix(batch, arch: Architecture) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        x = batch
    else:
        x = np.stack([f.tensor.flat() if hasattr(f, "tensor") else f.flat()
                      for f in batch])
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise DataError(
            f"batch must be (n, {arch.input_dim}), got {x.shape}")
    return x


def forward(params: ModelParams, batch, arch: Architecture,
            head: str = HEAD_SIGMOID,
            want_cache: bool = False):
    """Run the network.

    Returns (logits, head_out) where logits is the pre-squash output
    layer and head_out applies the chosen squashing.  With want_cache
    the ForwardCache is returned as a third element.
    """
    if head not in HEADS:
        raise ConfigError(f"unknown head {head!r}")
    x = _as_matrix(batch, arch)
    dtype = params.conv_w.dtype
    if x.dtype != dtype:
        x = x.astype(dtype)
    windows = np.lib.stride_tricks.sliding_window_view(
        x, arch.conv_width, axis=1)[:, ::arch.conv_stride]
    conv = windows @ params.conv_w + params.conv_b        # (n, P, C)
    argmax = conv.argmax(axis=1)                          # (n, C)
    n = x.shape[0]
    rows = np.arange(n)[:, None]
    pooled = conv[rows, argmax, np.arange(arch.conv_channels)[None, :]]
    fc1_pre = pooled @ params.fc1_w + params.fc1_b
    fc1_out = relu6(fc1_pre)
    logits = fc1_out @ params.fc2_w + params.fc2_b
    head_out = sigmoid(logits) if head == HEAD_SIGMOID else softmax(logits)
    if want_cache:
        cache = ForwardCache(x=x, windows=windows, argmax=argmax,
                             pooled=pooled, fc1_pre=fc1_pre,
                             fc1_out=fc1_out, logits=logits)
        return logits, head_out, cache
    return logits, head_out


# ---------------------------------------------------------------------------
# losses (all sum-reduced over samples and classes)

_EPS = 1e-7


def loss_one_vs_rest(probs: np.ndarray, targets: np.ndarray) -> float:
    """Sum of per-class binary cross entropies.

    targets is (n, K) of 0/1; a row of all zeros is valid and trains
    every unit toward rejection.
    """
    if probs.shape != targets.shape:
        raise DataError(f"shape mismatch {probs.shape} vs {targets.shape}")
    p = np.clip(probs, _EPS, 1.0 - _EPS)
    t = targets
    return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum())


def loss_softmax_ce(probs: np.ndarray, targets: np.ndarray) -> float:
    """Sum over samples of -log probability mass on the target classes."""
    if probs.shape != targets.shape:
        raise DataError(f"shape mismatch {probs.shape} vs {targets.shape}")
    p = np.clip(probs, _EPS, 1.0)
    return float(-(targets * np.log(p)).sum())


def loss_centroid_pull(logits: np.ndarray, labels: Sequence[str],
                       centroids: dict) -> float:
    """Sum of squared distances to the centroid of each sample's label."""
    total = 0.0
    for i, label in enumerate(labels):
        if label not in centroids:
            raise DataError(f"no centroid for label {label!r}")
        d = logits[i] - centroids[label]
        total += float(d @ d)
    return total


def _centroid_matrix(labels: Sequence[str], centroids: dict,
                     dtype) -> np.ndarray:
    return np.stack([np.asarray(centroids[l], dtype=dtype) for l in labels])


def total_loss(logits: np.ndarray, head_out: np.ndarray,
               targets: np.ndarray, head: str,
               labels: Optional[Sequence[str]] = None,
               centroids: Optional[dict] = None,
               pull_weight: float = 0.0) -> float:
    """Classification loss plus optional weighted centroid pull."""
    base = (loss_one_vs_rest(head_out, targets) if head == HEAD_SIGMOID
            else loss_softmax_ce(head_out, targets))
    if pull_weight > 0.0:
        if labels is None or centroids is None:
            raise ConfigError("centroid pull needs labels and centroids")
        # samples without a centroid (reserved labels) are skipped
        keep = [i for i, l in enumerate(labels) if l in centroids]
        if keep:
            kept_labels = [labels[i] for i in keep]
            base += pull_weight * loss_centroid_pull(
                logits[keep], kept_labels, centroids)
    return base


# ---------------------------------------------------------------------------
# backward

def backward(params: ModelParams, cache: ForwardCache, head_out: np.ndarray,
             targets: np.ndarray, arch: Architecture, head: str,
             labels: Optional[Sequence[str]] = None,
             centroids: Optional[dict] = None,
             pull_weight: float = 0.0) -> ModelParams:
    """Exact gradients of total_loss with respect to every parameter.

    Returns a ModelParams holding gradients in the same slots.
    """
    n = cache.x.shape[0]
    dtype = params.conv_w.dtype
    # both heads reduce to (head_out - targets) at the output layer
    dlogits = (head_out - targets).astype(dtype)
    if pull_weight > 0.0:
        if labels is None or centroids is None:
            raise ConfigError("centroid pull needs labels and centroids")
        keep = [i for i, l in enumerate(labels) if l in centroids]
        if keep:
            kept_labels = [labels[i] for i in keep]
            c = _centroid_matrix(kept_labels, centroids, dtype)
            dlogits[keep] += 2.0 * pull_weight * (cache.logits[keep] - c)

    dfc2_w = cache.fc1_out.T @ dlogits
    dfc2_b = dlogits.sum(axis=0)
    dfc1_out = dlogits @ params.fc2_w.T
    relu_gate = ((cache.fc1_pre > 0.0) & (cache.fc1_pre < 6.0)).astype(dtype)
    dfc1_pre = dfc1_out * relu_gate
    dfc1_w = cache.pooled.T @ dfc1_pre
    dfc1_b = dfc1_pre.sum(axis=0)
    dpooled = dfc1_pre @ params.fc1_w.T                    # (n, C)

    # route pooled gradients back through the winning window only
    rows = np.arange(n)[:, None]
    win = cache.windows[rows, cache.argmax]                # (n, C, W)
    dconv_w = np.einsum("ncw,nc->wc", win, dpooled)
    dconv_b = dpooled.sum(axis=0)

    return ModelParams(conv_w=dconv_w.astype(dtype),
                       conv_b=dconv_b.astype(dtype),
                       fc1_w=dfc1_w.astype(dtype),
                       fc1_b=dfc1_b.astype(dtype),
                       fc2_w=dfc2_w.astype(dtype),
                       fc2_b=dfc2_b.astype(dtype),
                       rng_seed=params.rng_seed)


# ---------------------------------------------------------------------------
# targets

def build_targets(labels: Sequence[str], class_list: Sequence[str],
                  head: str, reserved_label: Optional[str] = None,
                  dtype=np.float32) -> np.ndarray:
    """One-hot rows for known labels; all-zero rows for the reserved one.

    Labels outside class_list other than reserved_label are an error,
    and the softmax head cannot express an all-zero target.
    """
    index = {c: i for i, c in enumerate(class_list)}
    if len(index) != len(class_list):
        raise DataError(f"duplicate class names: {list(class_list)}")
    t = np.zeros((len(labels), len(class_list)), dtype=dtype)
    strays = sorted({l for l in labels
                     if l not in index and l != reserved_label})
    if strays:
        raise DataError(f"labels outside the class list: {strays}")
    for i, label in enumerate(labels):
        if label == reserved_label and label not in index:
            if head == HEAD_SOFTMAX:
                raise ConfigError(
                    "softmax head cannot train on all-zero targets")
            continue
        t[i, index[label]] = 1.0
    return t


# ---------------------------------------------------------------------------
# Adam

@dataclass
class TrainConfig:
    """Optimization settings."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle_seed: int = 0


class Adam:
    """Adam state over a fixed parameter layout."""

    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.t += 1
        cfg = self.cfg
        lr_t = cfg.learning_rate * (
            np.sqrt(1.0 - cfg.beta2 ** self.t) / (1.0 - cfg.beta1 ** self.t))
        for i, (p, g) in enumerate(zip(params.arrays(), grads.arrays())):
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * (g * g)
            p -= lr_t * self.m[i] / (np.sqrt(self.v[i]) + cfg.eps)


def train_epoch(params: ModelParams, x: np.ndarray, targets: np.ndarray,
                arch: Architecture, head: str, cfg: TrainConfig,
                adam: Adam, rng: np.random.Generator,
                labels: Optional[Sequence[str]] = None,
                centroids: Optional[dict] = None,
                pull_weight: float = 0.0) -> float:
    """One shuffled pass; updates params in place, returns summed loss."""
    n = x.shape[0]
    order = rng.permutation(n)
    epoch_loss = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        xb, tb = x[idx], targets[idx]
        lb = [labels[i] for i in idx] if labels is not None else None
        logits, head_out, cache = forward(params, xb, arch, head=head,
                                          want_cache=True)
        loss = total_loss(logits, head_out, tb, head, labels=lb,
                          centroids=centroids, pull_weight=pull_weight)
        if not np.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {adam.t}: {loss!r}")
        epoch_loss += loss
        grads = backward(params, cache, head_out, tb, arch, head,
                         labels=lb, centroids=centroids,
                         pull_weight=pull_weight)
        adam.step(params, grads)
    return epoch_loss


def train(params: ModelParams, x: np.ndarray, targets: np.ndarray,
          arch: Architecture, head: str, cfg: TrainConfig,
          labels: Optional[Sequence[str]] = None,
          centroid_fn: Optional[Callable[[ModelParams, int], dict]] = None,
          pull_weight: float = 0.0,
          log: Optional[list] = None) -> ModelParams:
    """Train a copy of params for cfg.epochs passes and return it.

    centroid_fn(params, epoch) supplies fresh per-label centroids at
    the start of every epoch when the centroid pull is active.  With
    the same inputs and seeds the result is bit-for-bit reproducible.
    """
    if x.shape[0] == 0:
        raise DataError("empty training set")
    if x.shape[0] != targets.shape[0]:
        raise DataError("inputs and targets disagree on sample count")
    params = params.copy()
    adam = Adam(params, cfg)
    rng = np.random.default_rng(cfg.shuffle_seed)
    for epoch in range(cfg.epochs):
        centroids = None
        if pull_weight > 0.0:
            if centroid_fn is None:
                raise ConfigError("pull_weight > 0 needs a centroid_fn")
            centroids = centroid_fn(params, epoch)
        epoch_loss = train_epoch(params, x, targets, arch, head, cfg, adam,
                                 rng, labels=labels, centroids=centroids,
                                 pull_weight=pull_weight)
        if log is not None:
            log.append(epoch_loss / x.shape[0])
    return params
