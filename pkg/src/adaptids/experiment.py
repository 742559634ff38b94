"""Desk-scale evaluation protocol.

Every way of choosing K known classes from the label pool is trained
and then confronted with each leftover label as never-seen traffic.
Per-label accuracies are averaged over all experiments featuring the
label, accuracy CDFs and their areas support head-to-head comparison,
and two similarity analyses relate unknown labels to known classes.

Accuracy tables, CDF series, and similarity tables are written as CSV
plus one structured JSON document; all of them are byte-deterministic
for a fixed config.  Wall-clock and memory figures go to a separate
resources file since timings never reproduce exactly.
"""

from __future__ import annotations

import itertools
import json
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .clustering import (ClusterRun, ExperimentOutcome, choose_k,
                         signature_quality, similarity_by_misclassification,
                         similarity_by_clustering)
from .config import RunConfig
from .errors import ConfigError
from .flows import LabeledFlow, batch_matrix
from .heads import (KIND_DOCPP, KIND_OPENMAX, OpenMaxConfig, OpenSetModel,
                    RESERVED_TRAIN_LABEL, UNKNOWN, evaluate_open_set)
from .lifecycle import train_full_model
from .model import Architecture
from .synthetic import (SyntheticProfile, default_profile_pool,
                        generate_synthetic, load_profiles, train_test_split)


@dataclass
class ExperimentRecord:
    """One (head, known subset, novelty) evaluation."""

    head_kind: str
    known: list
    unknown_train: Optional[str]
    novelty: str
    closed: dict                 # known label -> accuracy in [0,1]
    rejection: float             # novelty rejection accuracy in [0,1]
    counts: dict                 # verdict -> count on novelty flows


@dataclass
class ExperimentReport:
    """Aggregated grid results; all accuracies in percent."""

    heads: list
    pool: list
    known_classes: int
    records: list = field(default_factory=list)
    closed_table: dict = field(default_factory=dict)   # label -> head -> pct
    open_table: dict = field(default_factory=dict)
    grouped_table: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)         # head -> label -> [cls]
    cdf: dict = field(default_factory=dict)            # head -> label -> series
    auc: dict = field(default_factory=dict)            # head -> label -> area
    similarity: dict = field(default_factory=dict)
    cluster_similarity: dict = field(default_factory=dict)
    quality: dict = field(default_factory=dict)        # posttrain effect
    resources: dict = field(default_factory=dict)


def _resolve_profiles(cfg: RunConfig) -> list[SyntheticProfile]:
    if cfg.data.profiles_path:
        return load_profiles(cfg.data.profiles_path)
    return default_profile_pool(cfg.data.pool_size)


def _arch_for(cfg: RunConfig, n_classes: int) -> Architecture:
    a = cfg.arch
    return Architecture(input_dim=a.input_dim, conv_width=a.conv_width,
                        conv_channels=a.conv_channels,
                        conv_stride=a.conv_stride, fc1_units=a.fc1_units,
                        n_classes=n_classes)


def _openmax_cfg(cfg: RunConfig) -> OpenMaxConfig:
    h = cfg.heads
    return OpenMaxConfig(tail_size=h.openmax_tail_size,
                         alpha=h.openmax_alpha,
                         distance=h.openmax_distance,
                         threshold=h.openmax_threshold)


def run_experiment_grid(cfg: RunConfig,
                        profiles: Optional[Sequence[SyntheticProfile]] = None,
                        ) -> ExperimentReport:
    """Exhaustive subset/novelty grid over the label pool."""
    if profiles is None:
        profiles = _resolve_profiles(cfg)
    pool = sorted(p.class_name for p in profiles)
    k = cfg.grid.known_classes
    if len(pool) < k + 1:
        raise ConfigError(f"pool of {len(pool)} labels cannot host "
                          f"{k} known classes plus a novelty")
    if KIND_DOCPP in cfg.heads.kinds and len(pool) < k + 2:
        raise ConfigError(
            "rejection training needs a leftover label besides the novelty")

    flows = generate_synthetic(list(profiles), cfg.data.flows_per_class,
                               cfg.data.seed)
    train_flows, test_flows = train_test_split(flows, cfg.data.test_fraction,
                                               cfg.data.seed + 1)
    train_by: dict[str, list[LabeledFlow]] = {}
    test_by: dict[str, list[LabeledFlow]] = {}
    for f in train_flows:
        train_by.setdefault(f.label, []).append(f)
    for f in test_flows:
        test_by.setdefault(f.label, []).append(f)

    report = ExperimentReport(heads=list(cfg.heads.kinds), pool=pool,
                              known_classes=k)
    train_cfg = cfg.train.to_train_config()
    resources = {"train_wall_s": {}, "trainings": {}, "peak_mem_mb": None,
                 "validation_s_per_1000": None, "flows_per_class":
                 cfg.data.flows_per_class}
    cluster_runs: dict[str, list[ClusterRun]] = {h: [] for h in
                                                 cfg.heads.kinds}
    first_training_done = False

    for head in cfg.heads.kinds:
        head_wall = 0.0
        n_trainings = 0
        for subset in itertools.combinations(pool, k):
            leftovers = [l for l in pool if l not in subset]
            if head == KIND_DOCPP:
                variants = [(u, [v for v in leftovers if v != u])
                            for u in leftovers]
            else:
                variants = [(None, leftovers)]
            for unknown_train, novelties in variants:
                if not novelties:
                    continue
                data = []
                for label in subset:
                    data.extend(train_by[label])
                if unknown_train is not None:
                    for f in train_by[unknown_train]:
                        data.append(LabeledFlow(tensor=f.tensor,
                                                label=RESERVED_TRAIN_LABEL,
                                                source=f.source, key=f.key))
                t0 = time.perf_counter()
                if not first_training_done:
                    tracemalloc.start()
                trained = train_full_model(
                    data, list(subset), head, train_cfg,
                    arch=_arch_for(cfg, k),
                    threshold=cfg.heads.threshold,
                    openmax_cfg=(_openmax_cfg(cfg)
                                 if head == KIND_OPENMAX else None),
                    seed=cfg.train.seed,
                    posttrain_epochs=cfg.grid.posttrain_epochs,
                    pull_weight=cfg.grid.pull_weight)
                model = trained["model"]
                if not first_training_done:
                    _, peak = tracemalloc.get_traced_memory()
                    tracemalloc.stop()
                    resources["peak_mem_mb"] = round(peak / 1e6, 2)
                    first_training_done = True
                head_wall += time.perf_counter() - t0
                n_trainings += 1
                if resources["validation_s_per_1000"] is None:
                    resources["validation_s_per_1000"] = \
                        _validation_throughput(model, test_flows)
                known_test = [f for label in subset for f in test_by[label]]
                for novelty in novelties:
                    rec = evaluate_open_set(model, known_test,
                                            test_by[novelty])
                    report.records.append(ExperimentRecord(
                        head_kind=head, known=list(subset),
                        unknown_train=unknown_train, novelty=novelty,
                        closed=rec.closed_accuracy,
                        rejection=rec.rejection_accuracy[novelty],
                        counts=rec.verdict_counts[novelty]))
                if len(novelties) >= 2:
                    group_flows = [f for label in novelties
                                   for f in test_by[label]]
                    sig = model.particularized(batch_matrix(group_flows))
                    cm = choose_k(sig, k_max=8, seed=cfg.grid.cluster_seed)
                    cluster_runs[head].append(ClusterRun(
                        labels=[f.label for f in group_flows],
                        cluster_ids=cm.assignment.tolist()))
        resources["train_wall_s"][head] = round(head_wall, 3)
        resources["trainings"][head] = n_trainings

    _aggregate(report, cfg)
    for head, runs in cluster_runs.items():
        if runs:
            report.cluster_similarity[head] = {
                label: [[other, round(pct, 2)] for other, pct in pairs]
                for label, pairs in similarity_by_clustering(runs).items()}
    if cfg.grid.posttrain_epochs > 0:
        report.quality = _posttrain_quality(cfg, train_by, pool, k,
                                            train_cfg)
    report.resources = resources
    return report


def _validation_throughput(model: OpenSetModel,
                           flows: Sequence[LabeledFlow]) -> float:
    probe = flows[:1000] if len(flows) >= 1000 else flows
    x = batch_matrix(probe)
    t0 = time.perf_counter()
    model.predict(x)
    elapsed = time.perf_counter() - t0
    return round(elapsed * 1000.0 / len(probe), 4)


def _aggregate(report: ExperimentReport, cfg: RunConfig) -> None:
    heads = report.heads
    # closed and open tables
    closed_acc: dict[str, dict[str, list[float]]] = {}
    open_acc: dict[str, dict[str, list[float]]] = {}
    for r in report.records:
        for label, acc in r.closed.items():
            closed_acc.setdefault(label, {}).setdefault(
                r.head_kind, []).append(acc)
        open_acc.setdefault(r.novelty, {}).setdefault(
            r.head_kind, []).append(r.rejection)
    report.closed_table = {
        label: {h: round(100.0 * float(np.mean(v[h])), 4)
                for h in heads if h in v}
        for label, v in sorted(closed_acc.items())}
    report.open_table = {
        label: {h: round(100.0 * float(np.mean(v[h])), 4)
                for h in heads if h in v}
        for label, v in sorted(open_acc.items())}

    # similarity and groups per head
    for head in heads:
        outcomes = [ExperimentOutcome(novelty_label=r.novelty,
                                      verdict_counts=r.counts)
                    for r in report.records if r.head_kind == head]
        if not outcomes:
            continue
        sim = similarity_by_misclassification(
            outcomes, accept_threshold=cfg.grid.accept_threshold)
        report.similarity[head] = {
            label: {"accepted_pct": round(rec.accepted_pct, 2),
                    "absorbed_by": [[cls, round(pct, 2)]
                                    for cls, pct in rec.absorbed_by]}
            for label, rec in sim.items()}
        report.groups[head] = {label: sorted(c for c, _ in rec.absorbed_by)
                               for label, rec in sim.items()}

    # grouped open-set accuracy: a verdict also counts when it names a
    # class in the novelty's similarity group
    grouped: dict[str, dict[str, list[float]]] = {}
    for r in report.records:
        group = set(report.groups.get(r.head_kind, {}).get(r.novelty, []))
        total = sum(r.counts.values())
        good = r.counts.get(UNKNOWN, 0) + sum(
            n for cls, n in r.counts.items()
            if cls != UNKNOWN and cls in group)
        grouped.setdefault(r.novelty, {}).setdefault(
            r.head_kind, []).append(good / total)
    report.grouped_table = {
        label: {h: round(100.0 * float(np.mean(v[h])), 4)
                for h in heads if h in v}
        for label, v in sorted(grouped.items())}

    # CDF series and areas
    for head in heads:
        series_by_label: dict[str, list] = {}
        aucs: dict[str, float] = {}
        all_accs: list[float] = []
        for label in report.pool:
            accs = sorted(100.0 * r.rejection for r in report.records
                          if r.head_kind == head and r.novelty == label)
            if not accs:
                continue
            n = len(accs)
            series_by_label[label] = [
                [round(100.0 * (i + 1) / n, 4), round(a, 4)]
                for i, a in enumerate(accs)]
            aucs[label] = round(100.0 - float(np.mean(accs)), 4)
            all_accs.extend(accs)
        if all_accs:
            aucs["overall"] = round(100.0 - float(np.mean(all_accs)), 4)
        report.cdf[head] = series_by_label
        report.auc[head] = aucs


def _posttrain_quality(cfg: RunConfig, train_by: dict, pool: list, k: int,
                       train_cfg) -> dict:
    """Refinement effect on one representative subset per head."""
    from .clustering import posttrain

    subset = pool[:k]
    data = [f for label in subset for f in train_by[label]]
    out: dict[str, dict] = {}
    for head in cfg.heads.kinds:
        if head == KIND_DOCPP:
            extra_label = next(l for l in pool if l not in subset)
            data_h = data + [LabeledFlow(tensor=f.tensor,
                                         label=RESERVED_TRAIN_LABEL,
                                         source=f.source, key=f.key)
                             for f in train_by[extra_label]]
        else:
            data_h = data
        trained = train_full_model(
            data_h, subset, head, train_cfg, arch=_arch_for(cfg, k),
            threshold=cfg.heads.threshold,
            openmax_cfg=_openmax_cfg(cfg) if head == KIND_OPENMAX else None,
            seed=cfg.train.seed)
        model = trained["model"]
        before = signature_quality(model, data_h, seed=cfg.grid.cluster_seed)
        refined = posttrain(model, data_h, cfg=train_cfg,
                            pull_weight=cfg.grid.pull_weight,
                            epochs=cfg.grid.posttrain_epochs,
                            cluster_seed=cfg.grid.cluster_seed)
        after = signature_quality(refined, data_h,
                                  seed=cfg.grid.cluster_seed)
        out[head] = {
            "before": {"completeness": round(before.completeness, 6),
                       "homogeneity": round(before.homogeneity, 6)},
            "after": {"completeness": round(after.completeness, 6),
                      "homogeneity": round(after.homogeneity, 6)}}
    return out


# ---------------------------------------------------------------------------
# writers

def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.2f}"


def _write_table(path: Path, table: dict, heads: Sequence[str]) -> None:
    lines = ["label," + ",".join(heads)]
    for label in sorted(table):
        row = table[label]
        lines.append(label + "," + ",".join(_fmt(row.get(h))
                                            for h in heads))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(report: ExperimentReport, outdir: str | Path) -> list[Path]:
    """Write all report files; returns the paths written."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    for name, table in (("closed_set.csv", report.closed_table),
                        ("open_set.csv", report.open_table),
                        ("open_set_grouped.csv", report.grouped_table)):
        p = outdir / name
        _write_table(p, table, report.heads)
        written.append(p)

    p = outdir / "auc.csv"
    lines = ["head,label,area_under_cdf"]
    for head in report.heads:
        for label in sorted(report.auc.get(head, {})):
            lines.append(f"{head},{label},{report.auc[head][label]:.4f}")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(p)

    for head in report.heads:
        for label, series in sorted(report.cdf.get(head, {}).items()):
            p = outdir / f"cdf_{head}_{label}.csv"
            lines = ["percentile,accuracy"]
            lines.extend(f"{pct:.2f},{acc:.2f}" for pct, acc in series)
            p.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(p)

    for head in report.heads:
        sim = report.similarity.get(head)
        if not sim:
            continue
        p = outdir / f"similarity_misclassification_{head}.csv"
        lines = ["label,accepted_pct,rank,similar_label,pct"]
        for label in sorted(sim):
            rec = sim[label]
            if not rec["absorbed_by"]:
                lines.append(f"{label},{rec['accepted_pct']:.2f},,,")
            for rank, (cls, pct) in enumerate(rec["absorbed_by"], start=1):
                lines.append(f"{label},{rec['accepted_pct']:.2f},"
                             f"{rank},{cls},{pct:.2f}")
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(p)

    for head in report.heads:
        pairs = report.cluster_similarity.get(head)
        if not pairs:
            continue
        p = outdir / f"similarity_clustering_{head}.csv"
        lines = ["label,other,pct"]
        for label in sorted(pairs):
            for other, pct in pairs[label]:
                lines.append(f"{label},{other},{pct:.2f}")
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(p)

    doc = {
        "heads": report.heads,
        "pool": report.pool,
        "known_classes": report.known_classes,
        "closed_table": report.closed_table,
        "open_table": report.open_table,
        "grouped_table": report.grouped_table,
        "groups": report.groups,
        "auc": report.auc,
        "cdf": report.cdf,
        "similarity": report.similarity,
        "cluster_similarity": report.cluster_similarity,
        "quality": report.quality,
        "experiments": [{
            "head": r.head_kind, "known": r.known,
            "unknown_train": r.unknown_train, "novelty": r.novelty,
            "closed": {l: round(a, 6) for l, a in sorted(r.closed.items())},
            "rejection": round(r.rejection, 6),
            "counts": r.counts,
        } for r in report.records],
    }
    p = outdir / "report.json"
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                 encoding="utf-8")
    written.append(p)

    # timings and memory never reproduce bit for bit, kept separate
    p = outdir / "resources.json"
    p.write_text(json.dumps(report.resources, indent=2, sort_keys=True)
                 + "\n", encoding="utf-8")
    written.append(p)
    return written


def deterministic_outputs(outdir: str | Path) -> list[Path]:
    """The report files expected to be byte-identical across reruns."""
    outdir = Path(outdir)
    return sorted(p for p in outdir.glob("*.csv")) + [outdir / "report.json"]
