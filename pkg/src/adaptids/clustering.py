"""Clustering of network signatures and partition quality metrics.

Rejected flows are grouped by k-means over the model's output-layer
signatures; the number of groups is picked by silhouette score.  The
same machinery drives the refinement phase that pulls signatures
toward per-class centroids, and two similarity analyses that relate
never-seen traffic to the classes a model already knows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .flows import LabeledFlow, batch_matrix
from .heads import (KIND_OPENMAX, OpenSetModel, RESERVED_TRAIN_LABEL,
                    UNKNOWN, fit_openmax_tails)
from .model import TrainConfig, build_targets, train

log = logging.getLogger(__name__)


@dataclass
class ClusterModel:
    """Result of one k-means run."""

    k: int
    centroids: np.ndarray        # (k, d)
    assignment: np.ndarray       # (n,) int
    inertia: float
    n_iter: int
    inertia_history: list = field(default_factory=list)


def _pairwise_sq(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared euclidean distances
    d = (points * points).sum(axis=1)[:, None] \
        + (centers * centers).sum(axis=1)[None, :] \
        - 2.0 * points @ centers.T
    return np.maximum(d, 0.0)


def _seed_centroids(points: np.ndarray, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=points.dtype)
    centers[0] = points[rng.integers(n)]
    d2 = _pairwise_sq(points, centers[:1]).min(axis=1)
    for i in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            centers[i] = points[rng.integers(n)]
            continue
        centers[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, _pairwise_sq(points, centers[i:i + 1])[:, 0])
    return centers


def kmeans(points: np.ndarray, k: int, seed: int = 0,
           max_iter: int = 300) -> ClusterModel:
    """Lloyd iteration to an assignment fixpoint.

    Ties go to the lowest cluster id; a cluster that loses all members
    is respawned at the point currently farthest from its own centroid.
    Asking for more clusters than distinct points is an error.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise DataError("points must be a nonempty (n, d) array")
    n_distinct = np.unique(points, axis=0).shape[0]
    if not (1 <= k <= n_distinct):
        raise DataError(f"k={k} but only {n_distinct} distinct points")
    rng = np.random.default_rng(seed)
    centers = _seed_centroids(points, k, rng)
    assignment = None
    history: list[float] = []
    for it in range(1, max_iter + 1):
        d2 = _pairwise_sq(points, centers)
        new_assignment = d2.argmin(axis=1)      # argmin takes lowest id
        inertia = float(d2[np.arange(points.shape[0]), new_assignment].sum())
        history.append(inertia)
        if assignment is not None and np.array_equal(assignment,
                                                     new_assignment):
            break
        assignment = new_assignment
        for c in range(k):
            members = points[assignment == c]
            if members.shape[0] > 0:
                centers[c] = members.mean(axis=0)
        empties = [c for c in range(k)
                   if not np.any(assignment == c)]
        if empties:
            own = d2[np.arange(points.shape[0]), assignment]
            for c in empties:
                far = int(np.argmax(own))
                centers[c] = points[far]
                own[far] = -1.0      # do not reuse the same point
    return ClusterModel(k=k, centroids=centers, assignment=assignment,
                        inertia=history[-1], n_iter=len(history),
                        inertia_history=history)


# ---------------------------------------------------------------------------
# partition quality

@dataclass(frozen=True)
class ClusterQuality:
    completeness: float
    homogeneity: float


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def completeness_homogeneity(class_labels: Sequence,
                             cluster_ids: Sequence) -> ClusterQuality:
    """Entropy-based agreement between a labeling and a clustering.

    completeness is 1 when each class lands in a single cluster,
    homogeneity is 1 when each cluster holds a single class; both are
    defined as 1 when the corresponding conditioning entropy is zero.
    Natural log throughout.
    """
    if len(class_labels) != len(cluster_ids):
        raise DataError("labels and cluster ids differ in length")
    if len(class_labels) == 0:
        raise DataError("empty partition")
    classes = {c: i for i, c in enumerate(dict.fromkeys(class_labels))}
    clusters = {c: i for i, c in enumerate(dict.fromkeys(cluster_ids))}
    m = np.zeros((len(classes), len(clusters)), dtype=np.float64)
    for cl, ku in zip(class_labels, cluster_ids):
        m[classes[cl], clusters[ku]] += 1.0
    n = m.sum()
    h_class = _entropy(m.sum(axis=1))
    h_cluster = _entropy(m.sum(axis=0))
    # H(class | cluster)
    h_class_given = 0.0
    for j in range(m.shape[1]):
        col = m[:, j]
        h_class_given += (col.sum() / n) * _entropy(col)
    # H(cluster | class)
    h_cluster_given = 0.0
    for i in range(m.shape[0]):
        row = m[i]
        h_cluster_given += (row.sum() / n) * _entropy(row)
    homogeneity = 1.0 if h_class == 0.0 else 1.0 - h_class_given / h_class
    completeness = (1.0 if h_cluster == 0.0
                    else 1.0 - h_cluster_given / h_cluster)
    return ClusterQuality(completeness=completeness, homogeneity=homogeneity)


def silhouette_score(points: np.ndarray, assignment: np.ndarray,
                     sample_cap: int = 1000, seed: int = 0) -> float:
    """Mean silhouette; large inputs are subsampled for the n^2 step."""
    points = np.asarray(points, dtype=np.float64)
    assignment = np.asarray(assignment)
    n = points.shape[0]
    ids = np.unique(assignment)
    if ids.size < 2 or n < 3:
        raise DataError("silhouette needs at least 2 clusters and 3 points")
    if n > sample_cap:
        rng = np.random.default_rng(seed)
        keep = rng.choice(n, size=sample_cap, replace=False)
        points, assignment = points[keep], assignment[keep]
        ids = np.unique(assignment)
        if ids.size < 2:
            raise DataError("subsample collapsed to one cluster")
        n = sample_cap
    d = np.sqrt(_pairwise_sq(points, points))
    scores = np.zeros(n)
    for i in range(n):
        own = assignment == assignment[i]
        n_own = int(own.sum())
        if n_own <= 1:
            scores[i] = 0.0     # singleton convention
            continue
        a = d[i, own].sum() / (n_own - 1)
        b = min(d[i, assignment == c].mean()
                for c in ids if c != assignment[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


SILHOUETTE_CUTOFF = 0.25


def choose_k(points: np.ndarray, k_max: int = 8, seed: int = 0,
             cutoff: float = SILHOUETTE_CUTOFF) -> ClusterModel:
    """Pick the cluster count in [1, k_max] by silhouette.

    The best silhouette among k >= 2 wins; if even the best structure
    is weak (below the cutoff) the data is treated as one cluster.
    """
    points = np.asarray(points, dtype=np.float64)
    n_distinct = np.unique(points, axis=0).shape[0]
    top = min(k_max, n_distinct, points.shape[0] - 1)
    best: Optional[tuple[float, ClusterModel]] = None
    for k in range(2, top + 1):
        model = kmeans(points, k, seed=seed)
        if np.unique(model.assignment).size < 2:
            continue
        s = silhouette_score(points, model.assignment, seed=seed)
        if best is None or s > best[0]:
            best = (s, model)
    if best is None or best[0] < cutoff:
        center = points.mean(axis=0, keepdims=True)
        inertia = float(_pairwise_sq(points, center).sum())
        return ClusterModel(k=1, centroids=center,
                            assignment=np.zeros(points.shape[0], dtype=int),
                            inertia=inertia, n_iter=1,
                            inertia_history=[inertia])
    return best[1]


# ---------------------------------------------------------------------------
# labeled centroids and the refinement phase

def label_centroids(model: ClusterModel, points: np.ndarray,
                    labels: Sequence[str]) -> dict:
    """One centroid per label from a clustering of labeled points.

    Clusters vote: each cluster takes its most common member label
    (ties to the lexicographically smallest).  Clusters sharing a
    winner are merged weighted by size; labels that win nowhere fall
    back to the mean of their own points; empty clusters are dropped
    with a warning.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] != len(labels):
        raise DataError("points and labels differ in length")
    winners: dict[int, str] = {}
    for c in range(model.k):
        member_idx = np.nonzero(model.assignment == c)[0]
        if member_idx.size == 0:
            log.warning("cluster %d is empty, dropped from labeling", c)
            continue
        counts: dict[str, int] = {}
        for i in member_idx:
            counts[labels[i]] = counts.get(labels[i], 0) + 1
        top = max(counts.values())
        winners[c] = sorted(l for l, n in counts.items() if n == top)[0]
    out: dict[str, np.ndarray] = {}
    weights: dict[str, float] = {}
    for c, label in winners.items():
        size = float(np.sum(model.assignment == c))
        add = model.centroids[c] * size
        if label in out:
            out[label] = out[label] + add
            weights[label] += size
        else:
            out[label] = add
            weights[label] = size
    for label in out:
        out[label] = out[label] / weights[label]
    for label in sorted(set(labels)):
        if label not in out:
            mask = np.array([l == label for l in labels])
            out[label] = points[mask].mean(axis=0)
    return out


def signature_quality(model: OpenSetModel, flows: Sequence[LabeledFlow],
                      seed: int = 0) -> ClusterQuality:
    """Cluster the known-label signatures with k = K and score them."""
    known = [f for f in flows if f.label in model.class_list]
    if not known:
        raise DataError("no flows with known labels")
    sig = model.particularized(batch_matrix(known))
    cm = kmeans(sig, k=len(model.class_list), seed=seed)
    return completeness_homogeneity([f.label for f in known], cm.assignment)


def posttrain(model: OpenSetModel, flows: Sequence[LabeledFlow],
              cfg: Optional[TrainConfig] = None,
              pull_weight: float = 0.1, epochs: int = 5,
              cluster_seed: int = 0) -> OpenSetModel:
    """Refinement pass: pull signatures toward per-class centroids.

    Each epoch re-clusters the known-label signatures (k = number of
    classes), labels the centroids by majority vote, then trains one
    pass on the classification loss plus pull_weight times the squared
    distance of every known sample's signature to its label centroid.
    Reserved rejection samples keep their all-zero targets but do not
    take part in the pull.
    """
    if cfg is None:
        cfg = TrainConfig()
    cfg = TrainConfig(epochs=epochs, batch_size=cfg.batch_size,
                      learning_rate=cfg.learning_rate, beta1=cfg.beta1,
                      beta2=cfg.beta2, eps=cfg.eps,
                      shuffle_seed=cfg.shuffle_seed)
    labels = [f.label for f in flows]
    x = batch_matrix(flows)
    known_idx = [i for i, l in enumerate(labels) if l in model.class_list]
    if not known_idx:
        raise DataError("refinement needs known-label flows")
    reserved = RESERVED_TRAIN_LABEL if model.head_kind != KIND_OPENMAX else None
    targets = build_targets(labels, model.class_list, model.train_head,
                            reserved_label=reserved)
    x_known = x[known_idx]
    labels_known = [labels[i] for i in known_idx]

    def centroid_fn(p, epoch):
        probe = OpenSetModel(arch=model.arch, params=p,
                             class_list=model.class_list,
                             head_kind=model.head_kind,
                             threshold=model.threshold,
                             openmax_cfg=model.openmax_cfg,
                             weibull=model.weibull)
        sig = probe.signatures(x_known)
        cm = kmeans(sig, k=len(model.class_list),
                    seed=cluster_seed + epoch)
        return label_centroids(cm, sig, labels_known)

    new_params = train(model.params, x, targets, model.arch,
                       model.train_head, cfg, labels=labels,
                       centroid_fn=centroid_fn, pull_weight=pull_weight)
    refined = OpenSetModel(arch=model.arch, params=new_params,
                           class_list=list(model.class_list),
                           head_kind=model.head_kind,
                           threshold=model.threshold,
                           openmax_cfg=model.openmax_cfg,
                           weibull=None,
                           generation=model.generation)
    if model.head_kind == KIND_OPENMAX:
        fit_openmax_tails(refined, x_known, labels_known)
    sig = refined.signatures(x_known)
    cm = kmeans(sig, k=len(model.class_list), seed=cluster_seed)
    refined.centroids = label_centroids(cm, sig, labels_known)
    return refined


# ---------------------------------------------------------------------------
# similarity analyses

@dataclass
class ExperimentOutcome:
    """Verdict tally for one novelty label in one experiment."""

    novelty_label: str
    verdict_counts: dict       # decision -> count over that label's flows


@dataclass
class SimilarityRecord:
    """How one never-seen label behaved across experiments."""

    label: str
    accepted_pct: float                  # experiments with enough rejection
    absorbed_by: list = field(default_factory=list)   # (class, pct) desc


def similarity_by_misclassification(outcomes: Sequence[ExperimentOutcome],
                                    accept_threshold: float = 0.70,
                                    ) -> dict:
    """Relate unknown labels to the classes that absorb their flows.

    An experiment counts as accepted when the label's rejection rate
    reaches accept_threshold; otherwise the known class receiving the
    most of its flows is recorded as the absorber.  Percentages are
    over all experiments featuring the label.
    """
    if not (0.0 < accept_threshold <= 1.0):
        raise ConfigError("accept_threshold must be in (0, 1]")
    per: dict[str, dict] = {}
    for out in outcomes:
        total = sum(out.verdict_counts.values())
        if total == 0:
            raise DataError(f"{out.novelty_label}: empty verdict counts")
        slot = per.setdefault(out.novelty_label,
                              {"n": 0, "accepted": 0, "absorbers": {}})
        slot["n"] += 1
        rejected = out.verdict_counts.get(UNKNOWN, 0)
        if rejected / total >= accept_threshold:
            slot["accepted"] += 1
            continue
        known = {d: c for d, c in out.verdict_counts.items() if d != UNKNOWN}
        top_count = max(known.values())
        absorber = sorted(d for d, c in known.items() if c == top_count)[0]
        slot["absorbers"][absorber] = slot["absorbers"].get(absorber, 0) + 1
    result: dict[str, SimilarityRecord] = {}
    for label in sorted(per):
        slot = per[label]
        n = slot["n"]
        absorbed = sorted(((cls, 100.0 * cnt / n)
                           for cls, cnt in slot["absorbers"].items()),
                          key=lambda t: (-t[1], t[0]))
        result[label] = SimilarityRecord(
            label=label, accepted_pct=100.0 * slot["accepted"] / n,
            absorbed_by=absorbed)
    return result


@dataclass
class ClusterRun:
    """One clustering of several never-seen labels together."""

    labels: Sequence[str]
    cluster_ids: Sequence[int]


def similarity_by_clustering(runs: Sequence[ClusterRun]) -> dict:
    """Relate unknown labels that tend to land in the same cluster.

    For every run each label takes its modal cluster; two labels
    coincide when their modal clusters match.  Reported per label as
    (other label, percentage of shared runs) sorted descending.
    """
    pair_hits: dict[tuple[str, str], int] = {}
    pair_runs: dict[tuple[str, str], int] = {}
    for run in runs:
        if len(run.labels) != len(run.cluster_ids):
            raise DataError("labels and cluster ids differ in length")
        modal: dict[str, int] = {}
        by_label: dict[str, dict[int, int]] = {}
        for l, c in zip(run.labels, run.cluster_ids):
            by_label.setdefault(l, {})[c] = by_label.setdefault(
                l, {}).get(c, 0) + 1
        for l, counts in by_label.items():
            top = max(counts.values())
            modal[l] = sorted(c for c, n in counts.items() if n == top)[0]
        names = sorted(modal)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                key = (a, b)
                pair_runs[key] = pair_runs.get(key, 0) + 1
                if modal[a] == modal[b]:
                    pair_hits[key] = pair_hits.get(key, 0) + 1
    out: dict[str, list] = {}
    for (a, b), n in pair_runs.items():
        pct = 100.0 * pair_hits.get((a, b), 0) / n
        out.setdefault(a, []).append((b, pct))
        out.setdefault(b, []).append((a, pct))
    for label in out:
        out[label].sort(key=lambda t: (-t[1], t[0]))
    return dict(sorted(out.items()))
