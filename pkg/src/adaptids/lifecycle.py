"""Serving-time lifecycle: buffer rejects, cluster them, take analyst
decisions, retrain on the side, swap atomically.

The active model keeps answering while a passive copy is trained with
the newly labeled classes.  Every published model generation lives in
its own checkpoint directory; a SERVING pointer file is written with a
write-then-rename so a crash can never leave it half written.  Analyst
decisions go to an append-only log that can be replayed.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .clustering import choose_k, posttrain, silhouette_score
from .errors import ConfigError, DataError, TrainingError
from .flows import LabeledFlow, batch_matrix
from .heads import (KIND_OPENMAX, OpenSetModel, OpenSetVerdict, UNKNOWN,
                    fit_openmax_tails)
from .model import (Architecture, TrainConfig, build_targets, init_params,
                    train)
from .synthetic import train_test_split

log = logging.getLogger(__name__)

CATEGORY_MALICIOUS = "MALICIOUS"
CATEGORY_UNSEEN_BENIGN = "UNSEEN_BENIGN"
CATEGORY_TEMPORARY_ANOMALY = "TEMPORARY_ANOMALY"
CATEGORIES = (CATEGORY_MALICIOUS, CATEGORY_UNSEEN_BENIGN,
              CATEGORY_TEMPORARY_ANOMALY)

PHASE_SERVING = "SERVING"
PHASE_RETRAINING = "RETRAINING"
PHASE_MIGRATING = "MIGRATING"


@dataclass
class LabelDecision:
    """One analyst call on one pending cluster."""

    cluster_id: int
    category: str
    new_class_name: Optional[str] = None
    analyst: str = ""
    timestamp: float = 0.0

    def validate_shape(self) -> None:
        if self.category not in CATEGORIES:
            raise DataError(f"unknown decision category {self.category!r}")
        if self.category == CATEGORY_MALICIOUS:
            if not self.new_class_name:
                raise DataError("a malicious decision needs a class name")
            if self.new_class_name == UNKNOWN:
                raise DataError(f"{UNKNOWN!r} is reserved")
        elif self.new_class_name:
            raise DataError(
                f"{self.category} does not take a class name")

    def validate(self, existing_classes: Sequence[str]) -> None:
        self.validate_shape()
        if self.category == CATEGORY_MALICIOUS \
                and self.new_class_name in existing_classes:
            raise DataError(
                f"class name {self.new_class_name!r} already exists")


class NoveltyBuffer:
    """Bounded FIFO of rejected flows."""

    def __init__(self, capacity: int = 10000, trigger: int = 200):
        if trigger > capacity:
            raise ConfigError("trigger cannot exceed capacity")
        self.capacity = capacity
        self.trigger = trigger
        self._items: list[LabeledFlow] = []
        self._lock = threading.Lock()
        self.evicted = 0

    def append(self, flow: LabeledFlow) -> None:
        with self._lock:
            self._items.append(flow)
            while len(self._items) > self.capacity:
                self._items.pop(0)
                self.evicted += 1

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def ready(self) -> bool:
        return len(self) >= self.trigger

    def drain(self) -> list[LabeledFlow]:
        with self._lock:
            items, self._items = self._items, []
            return items

    def extend(self, flows: Sequence[LabeledFlow]) -> None:
        for f in flows:
            self.append(f)


@dataclass
class PendingCluster:
    """A group of rejected flows waiting for an analyst."""

    cluster_id: int
    size: int
    centroid: np.ndarray
    member_indices: list            # into the buffered snapshot
    quality: Optional[float]        # silhouette of the whole clustering
    nearest_known: Optional[str]
    decision: Optional[LabelDecision] = None

    def summary(self) -> dict:
        return {"cluster_id": self.cluster_id, "size": self.size,
                "quality": self.quality, "nearest_known": self.nearest_known,
                "decided": self.decision is not None,
                "decision": asdict(self.decision) if self.decision else None}


def build_novelty_clusters(model: OpenSetModel,
                           flows: Sequence[LabeledFlow],
                           k_max: int = 8, seed: int = 0,
                           ) -> list[PendingCluster]:
    """Cluster buffered rejects in signature space, largest first."""
    if not flows:
        raise DataError("no buffered flows to cluster")
    sig = model.particularized(batch_matrix(flows))
    cm = choose_k(sig, k_max=k_max, seed=seed)
    quality: Optional[float] = None
    if cm.k >= 2:
        try:
            quality = silhouette_score(sig, cm.assignment, seed=seed)
        except DataError:
            quality = None
    clusters = []
    for c in range(cm.k):
        members = np.nonzero(cm.assignment == c)[0]
        if members.size == 0:
            continue
        nearest = None
        if model.centroids:
            names = sorted(model.centroids)
            dists = [float(np.linalg.norm(cm.centroids[c] -
                                          np.asarray(model.centroids[n],
                                                     dtype=np.float64)))
                     for n in names]
            nearest = names[int(np.argmin(dists))]
        clusters.append(PendingCluster(
            cluster_id=c, size=int(members.size),
            centroid=cm.centroids[c], member_indices=members.tolist(),
            quality=quality, nearest_known=nearest))
    clusters.sort(key=lambda pc: (-pc.size, pc.cluster_id))
    return clusters


@dataclass
class RetrainManifest:
    """Everything the passive model trains on."""

    flows: list
    class_list: list
    new_classes: list


def apply_decisions(clusters: Sequence[PendingCluster],
                    buffered: Sequence[LabeledFlow],
                    base_flows: Sequence[LabeledFlow],
                    class_list: Sequence[str],
                    benign_label: Optional[str] = None) -> RetrainManifest:
    """Fold decided clusters into a retraining manifest.

    Malicious clusters become a new class named by the analyst; flows
    judged benign merge into the configured benign class or are
    dropped when the deployment models no benign traffic; temporary
    anomalies are dropped.  Undecided clusters contribute nothing.
    """
    new_classes: list[str] = []
    extra: list[LabeledFlow] = []
    seen_ids = set()
    for pc in clusters:
        if pc.cluster_id in seen_ids:
            raise DataError(f"cluster {pc.cluster_id} listed twice")
        seen_ids.add(pc.cluster_id)
        if pc.decision is None:
            continue
        d = pc.decision
        d.validate(list(class_list) + new_classes)
        members = [buffered[i] for i in pc.member_indices]
        if d.category == CATEGORY_MALICIOUS:
            new_classes.append(d.new_class_name)
            for f in members:
                extra.append(LabeledFlow(tensor=f.tensor,
                                         label=d.new_class_name,
                                         source=f.source, key=f.key))
        elif d.category == CATEGORY_UNSEEN_BENIGN and benign_label:
            if benign_label not in class_list:
                raise ConfigError(
                    f"benign label {benign_label!r} not in the class list")
            for f in members:
                extra.append(LabeledFlow(tensor=f.tensor, label=benign_label,
                                         source=f.source, key=f.key))
        # UNSEEN_BENIGN without a benign class and TEMPORARY_ANOMALY drop
    return RetrainManifest(flows=list(base_flows) + extra,
                           class_list=list(class_list) + new_classes,
                           new_classes=new_classes)


# ---------------------------------------------------------------------------
# decision log

class DecisionLog:
    """Append-only JSONL record of analyst decisions."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, decision: LabelDecision, generation: int) -> None:
        rec = asdict(decision)
        rec["generation"] = generation
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def replay(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        with self.path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(
                        f"{self.path}:{lineno}: bad log record: {exc}"
                    ) from None
        return out


# ---------------------------------------------------------------------------
# deployment state on disk

class Deployment:
    """Checkpoint directory tree plus the SERVING pointer."""

    def __init__(self, state_dir: str | Path, retention: int = 3):
        if retention < 1:
            raise ConfigError("retention must be at least 1")
        self.state_dir = Path(state_dir)
        self.retention = retention
        (self.state_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.decision_log = DecisionLog(self.state_dir / "decisions.log")

    @property
    def pointer_path(self) -> Path:
        return self.state_dir / "SERVING"

    def serving_info(self) -> Optional[dict]:
        if not self.pointer_path.exists():
            return None
        try:
            return json.loads(self.pointer_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt SERVING pointer: {exc}") from None

    def publish(self, model: OpenSetModel) -> dict:
        """Check the model in as the next generation and point at it."""
        info = self.serving_info()
        generation = (info["generation"] + 1) if info else 0
        model.generation = generation
        gen_dir = self.state_dir / "checkpoints" / f"{generation:06d}"
        gen_dir.mkdir(parents=True, exist_ok=True)
        tmp_name = gen_dir / "model.ckpt"
        digest = save_checkpoint(model, tmp_name)
        final = gen_dir / f"{digest}.ckpt"
        tmp_name.replace(final)
        pointer = {"generation": generation, "hash": digest,
                   "path": str(final.relative_to(self.state_dir)),
                   "published_at": time.time()}
        tmp = self.pointer_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(pointer, sort_keys=True) + "\n",
                       encoding="utf-8")
        tmp.replace(self.pointer_path)
        self._prune(keep_latest=generation)
        return pointer

    def load_serving(self) -> OpenSetModel:
        info = self.serving_info()
        if info is None:
            raise DataError(f"no SERVING pointer in {self.state_dir}")
        path = self.state_dir / info["path"]
        digest = file_digest(path)
        if digest != info["hash"]:
            raise DataError(
                f"checkpoint hash mismatch: pointer says {info['hash']}, "
                f"file is {digest}")
        return load_checkpoint(path)

    def generations(self) -> list[int]:
        root = self.state_dir / "checkpoints"
        return sorted(int(p.name) for p in root.iterdir()
                      if p.is_dir() and p.name.isdigit())

    def rollback(self) -> dict:
        """Point SERVING at the newest generation before the current."""
        info = self.serving_info()
        if info is None:
            raise DataError("nothing is serving")
        older = [g for g in self.generations() if g < info["generation"]]
        if not older:
            raise DataError("no earlier generation to roll back to")
        target = older[-1]
        gen_dir = self.state_dir / "checkpoints" / f"{target:06d}"
        ckpts = sorted(gen_dir.glob("*.ckpt"))
        if not ckpts:
            raise DataError(f"generation {target} has no checkpoint")
        digest = file_digest(ckpts[0])
        pointer = {"generation": target, "hash": digest,
                   "path": str(ckpts[0].relative_to(self.state_dir)),
                   "published_at": time.time()}
        tmp = self.pointer_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(pointer, sort_keys=True) + "\n",
                       encoding="utf-8")
        tmp.replace(self.pointer_path)
        return pointer

    def _prune(self, keep_latest: int) -> None:
        gens = self.generations()
        keep = set(g for g in gens if g > keep_latest - self.retention)
        for g in gens:
            if g in keep:
                continue
            gen_dir = self.state_dir / "checkpoints" / f"{g:06d}"
            for p in gen_dir.glob("*"):
                p.unlink()
            gen_dir.rmdir()


# ---------------------------------------------------------------------------
# the orchestrator

@dataclass
class LifecycleConfig:
    """Knobs for the serve-cluster-label-retrain loop."""

    buffer_capacity: int = 10000
    buffer_trigger: int = 200
    k_max: int = 8
    cluster_seed: int = 0
    retention: int = 3
    benign_label: Optional[str] = None
    min_val_accuracy: float = 0.8
    val_fraction: float = 0.2
    posttrain_epochs: int = 5
    pull_weight: float = 0.1
    retrain_seed: int = 7


@dataclass
class RetrainReport:
    """What happened during one retrain attempt."""

    ok: bool
    generation: Optional[int] = None
    checkpoint_hash: Optional[str] = None
    class_list: list = field(default_factory=list)
    new_classes: list = field(default_factory=list)
    val_accuracy: Optional[float] = None
    duration_s: float = 0.0
    error: Optional[str] = None


class LifecycleManager:
    """Single object the service talks to.

    Verdicts are produced from whatever model is active at call time;
    a retrain builds and validates the passive model first and only
    then swaps the in-memory reference and the SERVING pointer, so
    there is no moment without a working model.
    """

    def __init__(self, deployment: Deployment,
                 base_flows: Sequence[LabeledFlow],
                 train_cfg: TrainConfig,
                 cfg: Optional[LifecycleConfig] = None):
        self.deployment = deployment
        self.cfg = cfg or LifecycleConfig()
        self.train_cfg = train_cfg
        self.base_flows = list(base_flows)
        self.buffer = NoveltyBuffer(capacity=self.cfg.buffer_capacity,
                                    trigger=self.cfg.buffer_trigger)
        self._model = deployment.load_serving()
        self._lock = threading.Lock()
        self._retrain_lock = threading.Lock()
        self.phase = PHASE_SERVING
        self.pending: list[PendingCluster] = []
        self._pending_snapshot: list[LabeledFlow] = []
        self.verdict_counts: dict[str, int] = {}
        self.last_report: Optional[RetrainReport] = None

    # -- serving ----------------------------------------------------------

    @property
    def model(self) -> OpenSetModel:
        with self._lock:
            return self._model

    def active_info(self) -> Optional[dict]:
        return self.deployment.serving_info()

    def observe(self, flow: LabeledFlow) -> OpenSetVerdict:
        """Classify one flow; rejected flows feed the novelty buffer."""
        verdict = self.model.predict(flow.tensor.flat()[None, :])[0]
        with self._lock:
            self.verdict_counts[verdict.decision] = \
                self.verdict_counts.get(verdict.decision, 0) + 1
        if verdict.decision == UNKNOWN:
            self.buffer.append(flow)
            if self.buffer.ready() and not self.pending \
                    and self.phase == PHASE_SERVING:
                self.build_clusters()   # scheduled exactly once
        return verdict

    # -- clustering and decisions -----------------------------------------

    def build_clusters(self) -> list[PendingCluster]:
        snapshot = self.buffer.drain()
        if not snapshot:
            raise DataError("novelty buffer is empty")
        self._pending_snapshot = snapshot
        self.pending = build_novelty_clusters(
            self.model, snapshot, k_max=self.cfg.k_max,
            seed=self.cfg.cluster_seed)
        return self.pending

    def get_cluster(self, cluster_id: int) -> PendingCluster:
        for pc in self.pending:
            if pc.cluster_id == cluster_id:
                return pc
        raise KeyError(cluster_id)

    def cluster_samples(self, cluster_id: int,
                        limit: int = 5) -> list[LabeledFlow]:
        pc = self.get_cluster(cluster_id)
        return [self._pending_snapshot[i]
                for i in pc.member_indices[:max(0, limit)]]

    def decide(self, decision: LabelDecision) -> PendingCluster:
        """Attach a decision.

        Raises KeyError for an unknown cluster, FileExistsError when
        the cluster is already decided or the class name is taken
        (conflicts), DataError for a malformed decision.
        """
        pc = self.get_cluster(decision.cluster_id)
        if pc.decision is not None:
            raise FileExistsError(
                f"cluster {decision.cluster_id} already decided")
        decision.validate_shape()
        if decision.category == CATEGORY_MALICIOUS:
            taken = set(self.model.class_list)
            taken.update(p.decision.new_class_name for p in self.pending
                         if p.decision and p.decision.new_class_name)
            if decision.new_class_name in taken:
                raise FileExistsError(
                    f"class name {decision.new_class_name!r} already in use")
        if not decision.timestamp:
            decision.timestamp = time.time()
        pc.decision = decision
        info = self.active_info()
        self.deployment.decision_log.append(
            decision, info["generation"] if info else -1)
        return pc

    # -- retraining --------------------------------------------------------

    def retrain(self, min_val_accuracy: Optional[float] = None,
                ) -> RetrainReport:
        """Train the passive model and swap it in if it validates.

        Runs in the calling thread; the active model keeps serving
        concurrently.  Only one retrain can run at a time.
        """
        if not self._retrain_lock.acquire(blocking=False):
            raise RuntimeError("a retrain is already running")
        started = time.monotonic()
        floor = (self.cfg.min_val_accuracy if min_val_accuracy is None
                 else min_val_accuracy)
        try:
            self.phase = PHASE_RETRAINING
            report = self._retrain_inner(floor)
        except Exception as exc:       # keep serving whatever happens
            log.warning("retrain failed: %s", exc)
            report = RetrainReport(ok=False, error=str(exc))
        finally:
            self._retrain_lock.release()
        report.duration_s = time.monotonic() - started
        # on failure the active model and pending clusters are untouched
        self.phase = PHASE_SERVING
        self.last_report = report
        return report

    def _retrain_inner(self, floor: float) -> RetrainReport:
        decided = [pc for pc in self.pending if pc.decision is not None]
        if not decided:
            raise DataError("no decided clusters to retrain on")
        manifest = apply_decisions(self.pending, self._pending_snapshot,
                                   self.base_flows,
                                   self.model.class_list,
                                   benign_label=self.cfg.benign_label)
        old = self.model
        info = self.active_info()
        generation = (info["generation"] + 1) if info else 0
        seed = self.cfg.retrain_seed + generation
        passive = train_full_model(
            manifest.flows, manifest.class_list, old.head_kind,
            self.train_cfg, arch=old.arch, threshold=old.threshold,
            openmax_cfg=old.openmax_cfg, seed=seed,
            posttrain_epochs=self.cfg.posttrain_epochs,
            pull_weight=self.cfg.pull_weight,
            val_fraction=self.cfg.val_fraction)
        val_acc = passive.pop("val_accuracy")
        model = passive.pop("model")
        if val_acc < floor:
            raise TrainingError(
                f"validation accuracy {val_acc:.3f} below the "
                f"{floor:.3f} floor, keeping the active model")
        self.phase = PHASE_MIGRATING
        pointer = self.deployment.publish(model)
        with self._lock:
            self._model = model
        # decided flows are consumed; undecided ones are re-scored by
        # the new model and re-buffered only if still rejected
        undecided = [pc for pc in self.pending if pc.decision is None]
        leftovers = [self._pending_snapshot[i]
                     for pc in undecided for i in pc.member_indices]
        self.pending = []
        self._pending_snapshot = []
        if leftovers:
            verdicts = model.predict(batch_matrix(leftovers))
            self.buffer.extend([f for f, v in zip(leftovers, verdicts)
                                if v.decision == UNKNOWN])
        self.base_flows = manifest.flows
        return RetrainReport(ok=True, generation=pointer["generation"],
                             checkpoint_hash=pointer["hash"],
                             class_list=manifest.class_list,
                             new_classes=manifest.new_classes,
                             val_accuracy=val_acc)

    def status(self) -> dict:
        info = self.active_info()
        return {
            "phase": self.phase,
            "generation": info["generation"] if info else None,
            "checkpoint_hash": info["hash"] if info else None,
            "class_list": list(self.model.class_list),
            "buffer_size": len(self.buffer),
            "pending_clusters": len(self.pending),
            "decided_clusters": sum(1 for pc in self.pending
                                    if pc.decision is not None),
            "verdict_counts": dict(sorted(self.verdict_counts.items())),
            "last_retrain": (asdict(self.last_report)
                             if self.last_report else None),
        }


def train_full_model(flows: Sequence[LabeledFlow], class_list: Sequence[str],
                     head_kind: str, train_cfg: TrainConfig,
                     arch: Optional[Architecture] = None,
                     threshold=0.5, openmax_cfg=None, seed: int = 0,
                     posttrain_epochs: int = 0, pull_weight: float = 0.1,
                     val_fraction: float = 0.0) -> dict:
    """Initialize, train, optionally refine, optionally validate.

    Returns {"model": OpenSetModel, "val_accuracy": float}; validation
    accuracy is 1.0 when no validation split was requested.
    """
    from .heads import KIND_DOCPP, RESERVED_TRAIN_LABEL

    if arch is None:
        arch = Architecture(n_classes=len(class_list))
    elif arch.n_classes != len(class_list):
        arch = Architecture(input_dim=arch.input_dim,
                            conv_width=arch.conv_width,
                            conv_channels=arch.conv_channels,
                            conv_stride=arch.conv_stride,
                            fc1_units=arch.fc1_units,
                            n_classes=len(class_list))
    val_flows: list[LabeledFlow] = []
    train_flows = list(flows)
    if val_fraction > 0.0:
        known = [f for f in train_flows if f.label in class_list]
        rest = [f for f in train_flows if f.label not in class_list]
        known_train, val_flows = train_test_split(known, val_fraction,
                                                  seed=seed)
        train_flows = known_train + rest
    labels = [f.label for f in train_flows]
    x = batch_matrix(train_flows)
    model = OpenSetModel(arch=arch,
                         params=init_params(arch, seed),
                         class_list=list(class_list), head_kind=head_kind,
                         threshold=threshold, openmax_cfg=openmax_cfg)
    reserved = RESERVED_TRAIN_LABEL if head_kind == KIND_DOCPP else None
    if head_kind != KIND_DOCPP:
        strays = sorted({l for l in labels if l not in class_list})
        if strays:
            raise DataError(f"labels outside the class list: {strays}")
    targets = build_targets(labels, class_list, model.train_head,
                            reserved_label=reserved)
    model.params = train(model.params, x, targets, arch, model.train_head,
                         train_cfg, labels=labels)
    if posttrain_epochs > 0:
        model = posttrain(model, train_flows, cfg=train_cfg,
                          pull_weight=pull_weight, epochs=posttrain_epochs,
                          cluster_seed=seed)
    elif head_kind == KIND_OPENMAX:
        known_idx = [i for i, l in enumerate(labels) if l in class_list]
        fit_openmax_tails(model, x[known_idx],
                          [labels[i] for i in known_idx])
    val_accuracy = 1.0
    if val_flows:
        hits = 0
        verdicts = model.predict(batch_matrix(val_flows))
        for f, v in zip(val_flows, verdicts):
            hits += 1 if v.decision == f.label else 0
        val_accuracy = hits / len(val_flows)
    return {"model": model, "val_accuracy": val_accuracy}
