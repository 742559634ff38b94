"""Open-set decision procedures on top of the trained network.

Three ways to say "none of the known classes":

* doc: per-class sigmoid scores, reject when every score sits below a
  threshold.
* docpp: same decision rule, but training saw extra samples with
  all-zero targets so the sigmoids learn to stay low off-manifold.
* openmax: extreme-value recalibration of the output activations; the
  probability mass shaved off the top classes becomes an explicit
  unknown score.

All three expose the same verdict shape so downstream code does not
care which one produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError
from .flows import LabeledFlow
from .model import (Architecture, ModelParams, HEAD_SIGMOID, HEAD_SOFTMAX,
                    build_targets, forward)

UNKNOWN = "UNKNOWN"
RESERVED_TRAIN_LABEL = "UNKNOWN_TRAIN"

KIND_DOC = "doc"
KIND_DOCPP = "docpp"
KIND_OPENMAX = "openmax"
HEAD_KINDS = (KIND_DOC, KIND_DOCPP, KIND_OPENMAX)

Threshold = Union[float, dict]


@dataclass
class OpenSetVerdict:
    """Decision for one flow."""

    decision: str                 # class name or UNKNOWN
    scores: np.ndarray            # per known class, after the head
    head_kind: str
    unknown_score: Optional[float] = None   # openmax only


def resolve_thresholds(threshold: Threshold,
                       class_list: Sequence[str]) -> np.ndarray:
    """Expand a global or per-class threshold into a (K,) array."""
    if isinstance(threshold, dict):
        missing = [c for c in class_list if c not in threshold]
        if missing:
            raise ConfigError(f"threshold missing classes: {missing}")
        return np.array([float(threshold[c]) for c in class_list])
    return np.full(len(class_list), float(threshold))


# ---------------------------------------------------------------------------
# doc / docpp

def doc_predict(scores: np.ndarray, class_list: Sequence[str],
                threshold: Threshold,
                head_kind: str = KIND_DOC) -> list[OpenSetVerdict]:
    """Threshold rule on sigmoid scores, rows of shape (n, K)."""
    scores = np.atleast_2d(scores)
    if scores.shape[1] != len(class_list):
        raise DataError(
            f"{scores.shape[1]} scores for {len(class_list)} classes")
    th = resolve_thresholds(threshold, class_list)
    verdicts = []
    for row in scores:
        passing = row >= th
        if passing.any():
            decision = class_list[int(np.argmax(np.where(passing, row,
                                                         -np.inf)))]
        else:
            decision = UNKNOWN
        verdicts.append(OpenSetVerdict(decision=decision, scores=row,
                                       head_kind=head_kind))
    return verdicts


def docpp_prepare_targets(labels: Sequence[str], class_list: Sequence[str],
                          reserved_label: str = RESERVED_TRAIN_LABEL,
                          dtype=np.float32) -> np.ndarray:
    """Targets for rejection training.

    Samples carrying reserved_label get an all-zero row; every class in
    class_list must keep its own output unit.  A dataset with more than
    one label outside the class list is refused, that is what the
    single reserved slot is for.
    """
    extra = sorted({l for l in labels if l not in class_list})
    if len(extra) > 1:
        raise DataError(
            f"expected one reserved label outside the class list, "
            f"found {extra}")
    if extra and extra[0] != reserved_label:
        raise DataError(
            f"label {extra[0]!r} is outside the class list; rename it to "
            f"{reserved_label!r} if it is meant as rejection material")
    return build_targets(labels, class_list, HEAD_SIGMOID,
                         reserved_label=reserved_label, dtype=dtype)


# ---------------------------------------------------------------------------
# weibull tail fitting

def fit_weibull(samples: Sequence[float]) -> tuple[float, float]:
    """Maximum-likelihood (shape, scale) for positive samples.

    Safeguarded Newton iteration on the profiled shape equation with a
    moment-based starting point.  Non-positive samples are ignored; a
    sample set without spread returns the degenerate (1.0, 1e-8) fit.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x[x > 0.0]
    if x.size < 2 or np.ptp(x) < 1e-12 * max(1.0, float(x.max())):
        return 1.0, 1e-8
    # scale invariance: fit on x/mean, then multiply the scale back
    mean = float(x.mean())
    y = x / mean
    logy = np.log(y)
    mean_log = float(logy.mean())
    # powers of y/max(y) never overflow and cancel out of every ratio
    r = y / y.max()

    def g_and_slope(k: float) -> tuple[float, float]:
        rk = r ** k
        s0 = float(rk.sum())
        s1 = float((rk * logy).sum())
        s2 = float((rk * logy * logy).sum())
        g = 1.0 / k + mean_log - s1 / s0
        slope = -1.0 / (k * k) - (s2 * s0 - s1 * s1) / (s0 * s0)
        return g, slope

    lo, hi = 1e-3, 1e3
    glo, _ = g_and_slope(lo)
    ghi, _ = g_and_slope(hi)
    if glo <= 0.0 or ghi >= 0.0:
        # pathological spread; fall back to the moment estimate
        cv = float(y.std(ddof=0))
        k = float(np.clip(cv ** -1.086 if cv > 0 else 1.0, 1e-3, 1e3))
    else:
        cv = float(y.std(ddof=0))
        k = float(np.clip(cv ** -1.086 if cv > 0 else 1.0, lo * 2, hi / 2))
        for _ in range(100):
            g, slope = g_and_slope(k)
            if g > 0.0:
                lo = k
            else:
                hi = k
            step = g / slope if slope != 0.0 else 0.0
            k_new = k - step
            if not (lo < k_new < hi):
                k_new = 0.5 * (lo + hi)
            if abs(k_new - k) <= 1e-12 * k:
                k = k_new
                break
            k = k_new
    scale_y = float(y.max() * (r ** k).mean() ** (1.0 / k))
    return float(k), scale_y * mean


def weibull_cdf(d: np.ndarray | float, shape: float, scale: float,
                shift: float = 0.0):
    """P(distance <= d) under the shifted fit; exactly 0 at the shift."""
    z = (np.asarray(d, dtype=np.float64) - shift) / scale
    out = np.where(z > 0.0, -np.expm1(-np.clip(z, 0.0, None) ** shape), 0.0)
    return float(out) if np.isscalar(d) else out


@dataclass
class WeibullTailModel:
    """Extreme-value model of one class's distance tail."""

    mav: np.ndarray
    shape: float
    scale: float
    shift: float
    tail_size: int

    def cdf(self, d: float) -> float:
        return weibull_cdf(d, self.shape, self.scale, self.shift)

    def to_dict(self) -> dict:
        return {"mav": self.mav.tolist(), "shape": self.shape,
                "scale": self.scale, "shift": self.shift,
                "tail_size": self.tail_size}

    @classmethod
    def from_dict(cls, d: dict) -> "WeibullTailModel":
        return cls(mav=np.asarray(d["mav"], dtype=np.float32),
                   shape=float(d["shape"]), scale=float(d["scale"]),
                   shift=float(d["shift"]), tail_size=int(d["tail_size"]))


DIST_EUCLIDEAN = "euclidean"
DIST_COSINE = "cosine"
DIST_EUCOS = "eucos"
DISTANCES = (DIST_EUCLIDEAN, DIST_COSINE, DIST_EUCOS)


@dataclass(frozen=True)
class OpenMaxConfig:
    """Recalibration settings."""

    tail_size: int = 20
    alpha: int = 3
    distance: str = DIST_EUCLIDEAN
    threshold: float = 0.5

    def __post_init__(self):
        if self.tail_size < 2:
            raise ConfigError("tail_size must be at least 2")
        if self.alpha < 1:
            raise ConfigError("alpha must be at least 1")
        if self.distance not in DISTANCES:
            raise ConfigError(f"unknown distance {self.distance!r}")


def activation_distance(v: np.ndarray, mav: np.ndarray,
                        metric: str) -> float:
    v = np.asarray(v, dtype=np.float64)
    mav = np.asarray(mav, dtype=np.float64)
    if metric == DIST_EUCLIDEAN:
        return float(np.linalg.norm(v - mav))
    nv = float(np.linalg.norm(v))
    nm = float(np.linalg.norm(mav))
    if nv == 0.0 or nm == 0.0:
        cos = 1.0
    else:
        cos = 1.0 - float(v @ mav) / (nv * nm)
    if metric == DIST_COSINE:
        return cos
    return float(np.linalg.norm(v - mav)) / 200.0 + cos


def openmax_fit(activations_by_class: dict,
                cfg: OpenMaxConfig) -> dict:
    """Fit one WeibullTailModel per class from its activation vectors.

    Distances from the class mean activation are sorted, the largest
    tail_size form the tail; the fit is shifted to the tail minimum so
    the CDF is exactly 0 there.
    """
    models: dict[str, WeibullTailModel] = {}
    for label in sorted(activations_by_class):
        acts = np.asarray(activations_by_class[label], dtype=np.float64)
        if acts.ndim != 2:
            raise DataError(f"{label}: activations must be 2-D")
        if acts.shape[0] < cfg.tail_size:
            raise DataError(
                f"class {label!r} has {acts.shape[0]} activation vectors, "
                f"needs at least tail_size={cfg.tail_size}")
        mav = acts.mean(axis=0)
        dists = np.array([activation_distance(a, mav, cfg.distance)
                          for a in acts])
        tail = np.sort(dists)[-cfg.tail_size:]
        shift = float(tail.min())
        shape, scale = fit_weibull(tail - shift)
        models[label] = WeibullTailModel(mav=mav.astype(np.float32),
                                         shape=shape, scale=scale,
                                         shift=shift,
                                         tail_size=cfg.tail_size)
    return models


def openmax_recalibrate(activation: np.ndarray, class_list: Sequence[str],
                        models: dict, cfg: OpenMaxConfig,
                        ) -> tuple[np.ndarray, float]:
    """Shave tail probability off the top-alpha activations.

    Returns (recalibrated K-vector, unknown activation).  The sum of
    both equals the sum of the input vector, mass is moved, never
    created.
    """
    v = np.asarray(activation, dtype=np.float64)
    if v.shape != (len(class_list),):
        raise DataError(f"activation shape {v.shape} does not match "
                        f"{len(class_list)} classes")
    missing = [c for c in class_list if c not in models]
    if missing:
        raise DataError(f"no tail model for classes: {missing}")
    alpha = min(cfg.alpha, len(class_list))
    order = np.argsort(v)[::-1]
    v_hat = v.copy()
    unknown = 0.0
    for rank, ci in enumerate(order[:alpha]):
        label = class_list[ci]
        m = models[label]
        w = m.cdf(activation_distance(v, m.mav, cfg.distance))
        rank_weight = (alpha - rank) / alpha
        shaved = v[ci] * w * rank_weight
        v_hat[ci] = v[ci] - shaved
        unknown += shaved
    return v_hat, float(unknown)


def openmax_predict(activations: np.ndarray, class_list: Sequence[str],
                    models: dict, cfg: OpenMaxConfig,
                    ) -> list[OpenSetVerdict]:
    """Full decision rule: recalibrate, softmax over K+1, threshold."""
    acts = np.atleast_2d(np.asarray(activations, dtype=np.float64))
    verdicts = []
    for v in acts:
        v_hat, unknown = openmax_recalibrate(v, class_list, models, cfg)
        full = np.concatenate([v_hat, [unknown]])
        full = full - full.max()
        p = np.exp(full)
        p /= p.sum()
        win = int(np.argmax(p))
        if win == len(class_list) or p[win] < cfg.threshold:
            decision = UNKNOWN
        else:
            decision = class_list[win]
        verdicts.append(OpenSetVerdict(decision=decision,
                                       scores=p[:-1],
                                       head_kind=KIND_OPENMAX,
                                       unknown_score=float(p[-1])))
    return verdicts


# ---------------------------------------------------------------------------
# the bundled model

@dataclass
class OpenSetModel:
    """Trained network plus everything its decision rule needs."""

    arch: Architecture
    params: ModelParams
    class_list: list[str]
    head_kind: str
    threshold: Threshold = 0.5
    openmax_cfg: Optional[OpenMaxConfig] = None
    weibull: Optional[dict] = None
    centroids: Optional[dict] = None
    generation: int = 0

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head_kind!r}")
        if len(self.class_list) != self.arch.n_classes:
            raise ConfigError(
                f"{len(self.class_list)} classes for an architecture "
                f"with {self.arch.n_classes} outputs")

    @property
    def train_head(self) -> str:
        return (HEAD_SOFTMAX if self.head_kind == KIND_OPENMAX
                else HEAD_SIGMOID)

    def signatures(self, batch) -> np.ndarray:
        """Output-layer activations (pre squashing), shape (n, K)."""
        logits, _ = forward(self.params, batch, self.arch,
                            head=self.train_head)
        return logits

    def particularized(self, batch) -> np.ndarray:
        """Vectors fed to novelty clustering.

        Sigmoid heads cluster the raw output activations; openmax
        clusters the recalibrated activations without the unknown slot.
        """
        logits = self.signatures(batch)
        if self.head_kind != KIND_OPENMAX:
            return logits
        self._need_weibull()
        out = np.empty_like(logits, dtype=np.float64)
        for i, v in enumerate(logits):
            out[i], _ = openmax_recalibrate(v, self.class_list,
                                            self.weibull, self.openmax_cfg)
        return out.astype(np.float32)

    def predict(self, batch) -> list[OpenSetVerdict]:
        logits, head_out = forward(self.params, batch, self.arch,
                                   head=self.train_head)
        if self.head_kind == KIND_OPENMAX:
            self._need_weibull()
            return openmax_predict(logits, self.class_list, self.weibull,
                                   self.openmax_cfg)
        return doc_predict(head_out, self.class_list, self.threshold,
                           head_kind=self.head_kind)

    def _need_weibull(self) -> None:
        if self.openmax_cfg is None or not self.weibull:
            raise ConfigError("openmax model without fitted tail models")


def fit_openmax_tails(model: OpenSetModel, train_x: np.ndarray,
                      train_labels: Sequence[str]) -> None:
    """Fit per-class tails from correctly classified training samples."""
    if model.openmax_cfg is None:
        raise ConfigError("model has no openmax configuration")
    logits = model.signatures(train_x)
    index = {c: i for i, c in enumerate(model.class_list)}
    by_class: dict[str, list[np.ndarray]] = {c: [] for c in model.class_list}
    for v, label in zip(logits, train_labels):
        if label in index and int(np.argmax(v)) == index[label]:
            by_class[label].append(v)
    short = [c for c, vs in by_class.items()
             if len(vs) < model.openmax_cfg.tail_size]
    if short:
        raise DataError(
            f"not enough correctly classified samples to fit tails for: "
            f"{sorted(short)}")
    model.weibull = openmax_fit(
        {c: np.stack(vs) for c, vs in by_class.items()}, model.openmax_cfg)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalRecord:
    """Closed and open accuracies plus raw verdict counts."""

    closed_accuracy: dict = field(default_factory=dict)
    rejection_accuracy: dict = field(default_factory=dict)
    verdict_counts: dict = field(default_factory=dict)
    n_known: int = 0
    n_novel: int = 0


def evaluate_open_set(model: OpenSetModel,
                      known_flows: Sequence[LabeledFlow],
                      novelty_flows: Sequence[LabeledFlow]) -> EvalRecord:
    """Score a model on known-class and never-seen traffic.

    Known labels must all be in the class list, novelty labels must all
    be outside it; any overlap between the two sets is an error.
    """
    known_labels = {f.label for f in known_flows}
    novel_labels = {f.label for f in novelty_flows}
    overlap = known_labels & novel_labels
    if overlap:
        raise DataError(f"labels on both sides of the split: "
                        f"{sorted(overlap)}")
    bad_known = known_labels - set(model.class_list)
    if bad_known:
        raise DataError(f"known-set labels missing from the class list: "
                        f"{sorted(bad_known)}")
    bad_novel = novel_labels & set(model.class_list)
    if bad_novel:
        raise DataError(f"novelty labels already in the class list: "
                        f"{sorted(bad_novel)}")

    rec = EvalRecord(n_known=len(known_flows), n_novel=len(novelty_flows))
    if known_flows:
        from .flows import batch_matrix
        verdicts = model.predict(batch_matrix(known_flows))
        per: dict[str, list[int]] = {}
        for flow, v in zip(known_flows, verdicts):
            per.setdefault(flow.label, []).append(
                1 if v.decision == flow.label else 0)
        rec.closed_accuracy = {l: float(np.mean(hits))
                               for l, hits in sorted(per.items())}
    if novelty_flows:
        from .flows import batch_matrix
        verdicts = model.predict(batch_matrix(novelty_flows))
        per_hit: dict[str, list[int]] = {}
        counts: dict[str, dict[str, int]] = {}
        for flow, v in zip(novelty_flows, verdicts):
            per_hit.setdefault(flow.label, []).append(
                1 if v.decision == UNKNOWN else 0)
            c = counts.setdefault(flow.label, {})
            c[v.decision] = c.get(v.decision, 0) + 1
        rec.rejection_accuracy = {l: float(np.mean(hits))
                                  for l, hits in sorted(per_hit.items())}
        rec.verdict_counts = {l: dict(sorted(c.items()))
                              for l, c in sorted(counts.items())}
    return rec
