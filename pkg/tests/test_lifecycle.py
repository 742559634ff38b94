"""Buffering, analyst decisions, deployment state and the retrain swap."""

from __future__ import annotations

import shutil

import numpy as np
import pytest

from adaptids.checkpoint import file_digest
from adaptids.errors import ConfigError, DataError
from adaptids.flows import FlowTensor, LabeledFlow
from adaptids.heads import (KIND_DOCPP, RESERVED_TRAIN_LABEL, UNKNOWN,
                            OpenSetModel, OpenSetVerdict)
from adaptids.lifecycle import (CATEGORY_MALICIOUS, CATEGORY_TEMPORARY_ANOMALY,
                                CATEGORY_UNSEEN_BENIGN, PHASE_SERVING,
                                DecisionLog, Deployment, LabelDecision,
                                LifecycleConfig, LifecycleManager,
                                NoveltyBuffer, PendingCluster,
                                apply_decisions, build_novelty_clusters,
                                train_full_model)
from adaptids.model import Architecture, init_params
from adaptids.synthetic import generate_synthetic
from conftest import quick_cfg, relabel, small_arch


def _flow(label, fill=0.0):
    data = np.full((100, 200), fill, dtype=np.float32)
    return LabeledFlow(tensor=FlowTensor(data=data, packet_count=1),
                       label=label, source="SYNTHETIC")


class TestLabelDecision:
    def test_unknown_category(self):
        with pytest.raises(DataError):
            LabelDecision(0, "SUSPICIOUS").validate_shape()

    def test_malicious_needs_name(self):
        with pytest.raises(DataError):
            LabelDecision(0, CATEGORY_MALICIOUS).validate_shape()

    def test_reserved_name_refused(self):
        with pytest.raises(DataError):
            LabelDecision(0, CATEGORY_MALICIOUS,
                          new_class_name=UNKNOWN).validate_shape()

    def test_benign_takes_no_name(self):
        with pytest.raises(DataError):
            LabelDecision(0, CATEGORY_UNSEEN_BENIGN,
                          new_class_name="oops").validate_shape()

    def test_name_collision(self):
        d = LabelDecision(0, CATEGORY_MALICIOUS, new_class_name="worm")
        d.validate_shape()
        with pytest.raises(DataError):
            d.validate(["worm", "benign"])

    def test_valid_decisions(self):
        LabelDecision(0, CATEGORY_MALICIOUS,
                      new_class_name="worm").validate(["benign"])
        LabelDecision(1, CATEGORY_UNSEEN_BENIGN).validate(["benign"])
        LabelDecision(2, CATEGORY_TEMPORARY_ANOMALY).validate([])


class TestNoveltyBuffer:
    def test_fifo_eviction(self):
        buf = NoveltyBuffer(capacity=5, trigger=2)
        for i in range(8):
            buf.append(_flow(f"f{i}"))
        assert len(buf) == 5
        assert buf.evicted == 3
        assert [f.label for f in buf.drain()] == [f"f{i}" for i in range(3, 8)]

    def test_trigger(self):
        buf = NoveltyBuffer(capacity=10, trigger=3)
        assert not buf.ready()
        buf.extend([_flow("a"), _flow("b"), _flow("c")])
        assert buf.ready()

    def test_drain_empties(self):
        buf = NoveltyBuffer(capacity=10, trigger=1)
        buf.append(_flow("a"))
        assert len(buf.drain()) == 1
        assert len(buf) == 0
        assert buf.drain() == []

    def test_trigger_above_capacity(self):
        with pytest.raises(ConfigError):
            NoveltyBuffer(capacity=5, trigger=6)


class _SpreadModel:
    """Maps each flow to a fixed point per label, no network involved."""

    def __init__(self, points, centroids=None):
        self._points = points
        self.centroids = centroids
        self.class_list = sorted(centroids) if centroids else []

    def particularized(self, batch):
        return np.array(self._points[:batch.shape[0]], dtype=np.float64)


class TestBuildNoveltyClusters:
    def test_groups_sorted_largest_first(self):
        flows = [_flow("x")] * 10 + [_flow("y")] * 6
        rng = np.random.default_rng(0)
        pts = ([list(rng.normal((0.0, 0.0), 0.2)) for _ in range(10)]
               + [list(rng.normal((20.0, 20.0), 0.2)) for _ in range(6)])
        model = _SpreadModel(pts, centroids={"a": np.array([0.0, 1.0]),
                                             "b": np.array([19.0, 19.0])})
        clusters = build_novelty_clusters(model, flows, k_max=8, seed=0)
        assert len(clusters) == 2
        assert clusters[0].size == 10 and clusters[1].size == 6
        assert clusters[0].nearest_known == "a"
        assert clusters[1].nearest_known == "b"
        assert clusters[0].quality is not None and clusters[0].quality > 0.5
        members = {i for pc in clusters for i in pc.member_indices}
        assert members == set(range(16))

    def test_empty_buffer(self):
        model = _SpreadModel([])
        with pytest.raises(DataError):
            build_novelty_clusters(model, [])

    def test_indistinct_signatures_form_one_cluster(self):
        flows = [_flow("x")] * 8
        model = _SpreadModel([[0.0, 0.0]] * 8)
        clusters = build_novelty_clusters(model, flows, k_max=8, seed=0)
        assert len(clusters) == 1
        assert clusters[0].size == 8
        assert clusters[0].quality is None
        assert clusters[0].nearest_known is None


def _pending(cluster_id, indices, decision=None):
    return PendingCluster(cluster_id=cluster_id, size=len(indices),
                          centroid=np.zeros(2), member_indices=indices,
                          quality=None, nearest_known=None,
                          decision=decision)


class TestApplyDecisions:
    def setup_method(self):
        self.buffered = [_flow(f"b{i}") for i in range(6)]
        self.base = [_flow("benign"), _flow("dos")]
        self.classes = ["benign", "dos"]

    def test_malicious_becomes_new_class(self):
        d = LabelDecision(0, CATEGORY_MALICIOUS, new_class_name="worm")
        manifest = apply_decisions([_pending(0, [0, 1, 2], d)],
                                   self.buffered, self.base, self.classes)
        assert manifest.new_classes == ["worm"]
        assert manifest.class_list == ["benign", "dos", "worm"]
        worms = [f for f in manifest.flows if f.label == "worm"]
        assert len(worms) == 3
        assert len(manifest.flows) == 5

    def test_benign_merge_grows_benign_class(self):
        d = LabelDecision(1, CATEGORY_UNSEEN_BENIGN)
        manifest = apply_decisions([_pending(1, [3, 4], d)],
                                   self.buffered, self.base, self.classes,
                                   benign_label="benign")
        benign = [f for f in manifest.flows if f.label == "benign"]
        assert len(benign) == 1 + 2
        assert manifest.new_classes == []

    def test_benign_dropped_without_benign_class(self):
        d = LabelDecision(1, CATEGORY_UNSEEN_BENIGN)
        manifest = apply_decisions([_pending(1, [3, 4], d)],
                                   self.buffered, self.base, self.classes,
                                   benign_label=None)
        assert len(manifest.flows) == len(self.base)

    def test_temporary_anomaly_dropped(self):
        d = LabelDecision(2, CATEGORY_TEMPORARY_ANOMALY)
        manifest = apply_decisions([_pending(2, [5], d)],
                                   self.buffered, self.base, self.classes)
        assert len(manifest.flows) == len(self.base)
        assert manifest.class_list == self.classes

    def test_undecided_contribute_nothing(self):
        manifest = apply_decisions([_pending(0, [0, 1])],
                                   self.buffered, self.base, self.classes)
        assert len(manifest.flows) == len(self.base)

    def test_duplicate_cluster_ids(self):
        with pytest.raises(DataError):
            apply_decisions([_pending(0, [0]), _pending(0, [1])],
                            self.buffered, self.base, self.classes)

    def test_name_collision_with_existing_class(self):
        d = LabelDecision(0, CATEGORY_MALICIOUS, new_class_name="dos")
        with pytest.raises(DataError):
            apply_decisions([_pending(0, [0], d)],
                            self.buffered, self.base, self.classes)

    def test_two_clusters_same_new_name(self):
        d1 = LabelDecision(0, CATEGORY_MALICIOUS, new_class_name="worm")
        d2 = LabelDecision(1, CATEGORY_MALICIOUS, new_class_name="worm")
        with pytest.raises(DataError):
            apply_decisions([_pending(0, [0], d1), _pending(1, [1], d2)],
                            self.buffered, self.base, self.classes)

    def test_benign_label_must_be_known(self):
        d = LabelDecision(0, CATEGORY_UNSEEN_BENIGN)
        with pytest.raises(ConfigError):
            apply_decisions([_pending(0, [0], d)],
                            self.buffered, self.base, self.classes,
                            benign_label="notaclass")


class TestDecisionLog:
    def test_append_and_replay(self, tmp_path):
        log = DecisionLog(tmp_path / "decisions.log")
        log.append(LabelDecision(3, CATEGORY_MALICIOUS,
                                 new_class_name="worm", analyst="ada",
                                 timestamp=12.5), generation=2)
        log.append(LabelDecision(1, CATEGORY_TEMPORARY_ANOMALY,
                                 timestamp=13.0), generation=2)
        records = log.replay()
        assert len(records) == 2
        assert records[0]["cluster_id"] == 3
        assert records[0]["new_class_name"] == "worm"
        assert records[0]["generation"] == 2
        assert records[1]["category"] == CATEGORY_TEMPORARY_ANOMALY

    def test_missing_file_replays_empty(self, tmp_path):
        assert DecisionLog(tmp_path / "absent.log").replay() == []

    def test_bad_line_reports_position(self, tmp_path):
        path = tmp_path / "decisions.log"
        path.write_text('{"ok": 1}\nnot json\n')
        with pytest.raises(DataError) as err:
            DecisionLog(path).replay()
        assert ":2:" in str(err.value)


TINY = Architecture(input_dim=400, conv_width=20, conv_channels=4,
                    conv_stride=20, fc1_units=12, n_classes=2)


def _tiny_model(seed=0):
    return OpenSetModel(arch=TINY, params=init_params(TINY, seed=seed),
                        class_list=["a", "b"], head_kind=KIND_DOCPP)


class TestDeployment:
    def test_publish_and_load(self, tmp_path):
        dep = Deployment(tmp_path / "state")
        pointer = dep.publish(_tiny_model())
        assert pointer["generation"] == 0
        back = dep.load_serving()
        assert back.generation == 0
        assert back.class_list == ["a", "b"]
        ckpt = tmp_path / "state" / pointer["path"]
        assert ckpt.name == f"{pointer['hash']}.ckpt"
        assert file_digest(ckpt) == pointer["hash"]

    def test_generations_increment(self, tmp_path):
        dep = Deployment(tmp_path / "state")
        assert dep.publish(_tiny_model(0))["generation"] == 0
        assert dep.publish(_tiny_model(1))["generation"] == 1
        assert dep.generations() == [0, 1]

    def test_prune_respects_retention(self, tmp_path):
        dep = Deployment(tmp_path / "state", retention=2)
        for seed in range(4):
            dep.publish(_tiny_model(seed))
        assert dep.generations() == [2, 3]

    def test_rollback(self, tmp_path):
        dep = Deployment(tmp_path / "state")
        dep.publish(_tiny_model(0))
        dep.publish(_tiny_model(1))
        pointer = dep.rollback()
        assert pointer["generation"] == 0
        assert dep.load_serving().params.rng_seed == 0

    def test_rollback_without_older_generation(self, tmp_path):
        dep = Deployment(tmp_path / "state")
        dep.publish(_tiny_model())
        with pytest.raises(DataError):
            dep.rollback()

    def test_load_without_pointer(self, tmp_path):
        dep = Deployment(tmp_path / "state")
        with pytest.raises(DataError):
            dep.load_serving()

    def test_tampered_checkpoint_detected(self, tmp_path):
        dep = Deployment(tmp_path / "state")
        pointer = dep.publish(_tiny_model())
        ckpt = tmp_path / "state" / pointer["path"]
        raw = bytearray(ckpt.read_bytes())
        raw[-1] ^= 0xFF
        ckpt.write_bytes(bytes(raw))
        with pytest.raises(DataError) as err:
            dep.load_serving()
        assert "mismatch" in str(err.value)

    def test_bad_retention(self, tmp_path):
        with pytest.raises(ConfigError):
            Deployment(tmp_path / "state", retention=0)


# ---------------------------------------------------------------------------
# the manager

@pytest.fixture(scope="module")
def base_env(tmp_path_factory, small_dataset, pool6):
    """One trained 3-class deployment reused by every manager test."""
    train_flows, test_flows = small_dataset
    labels = sorted({f.label for f in train_flows})
    known, reserved_src = labels[:3], labels[3]
    base = ([f for f in train_flows if f.label in known]
            + relabel([f for f in train_flows if f.label == reserved_src],
                      reserved_src, RESERVED_TRAIN_LABEL))
    result = train_full_model(base, known, KIND_DOCPP, quick_cfg(5, seed=2),
                              arch=small_arch(3), seed=2)
    root = tmp_path_factory.mktemp("deploy")
    dep = Deployment(root / "state")
    dep.publish(result["model"])
    novel = generate_synthetic(pool6[4:6], flows_per_class=30, seed=77)
    return {"state": root / "state", "base": base, "known": known,
            "novel": novel, "test": test_flows}


def make_manager(env, tmp_path, **cfg_kw):
    state = tmp_path / "state"
    shutil.copytree(env["state"], state)
    dep = Deployment(state)
    cfg = LifecycleConfig(buffer_trigger=16, cluster_seed=3,
                          posttrain_epochs=0, min_val_accuracy=0.3,
                          val_fraction=0.2, **cfg_kw)
    return LifecycleManager(dep, env["base"], quick_cfg(5, seed=2), cfg)


def _cluster_novelties(manager, env, n=40):
    manager.buffer.extend(env["novel"][:n])
    return manager.build_clusters()


class _RejectEverything:
    """Model stand-in whose verdicts are always UNKNOWN."""

    def __init__(self, class_list):
        self.class_list = class_list
        self.centroids = None

    def predict(self, batch):
        return [OpenSetVerdict(decision=UNKNOWN,
                               scores=np.zeros(len(self.class_list)),
                               head_kind=KIND_DOCPP)
                for _ in range(batch.shape[0])]

    def particularized(self, batch):
        return np.zeros((batch.shape[0], len(self.class_list)))


class TestLifecycleManager:
    def test_observe_counts_and_triggers_once(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        manager._model = _RejectEverything(base_env["known"])
        for f in base_env["novel"][:20]:
            manager.observe(f)
        assert manager.verdict_counts[UNKNOWN] == 20
        # trigger at 16 built clusters once, later rejects only buffer
        assert len(manager.pending) == 1
        assert len(manager.buffer) == 4
        status = manager.status()
        assert status["phase"] == PHASE_SERVING
        assert status["pending_clusters"] == 1

    def test_observe_known_flows_mostly_accepted(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        sample = [f for f in base_env["test"]
                  if f.label in base_env["known"]][:30]
        hits = sum(manager.observe(f).decision == f.label for f in sample)
        assert hits >= 24

    def test_get_cluster_unknown_id(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        with pytest.raises(KeyError):
            manager.get_cluster(99)

    def test_cluster_samples_capped(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        clusters = _cluster_novelties(manager, base_env)
        cid = clusters[0].cluster_id
        assert len(manager.cluster_samples(cid, limit=3)) == 3
        assert len(manager.cluster_samples(cid, limit=0)) == 0

    def test_decide_conflicts(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        clusters = _cluster_novelties(manager, base_env)
        cid = clusters[0].cluster_id
        manager.decide(LabelDecision(cid, CATEGORY_MALICIOUS,
                                     new_class_name="zero_day"))
        with pytest.raises(FileExistsError):
            manager.decide(LabelDecision(cid, CATEGORY_TEMPORARY_ANOMALY))
        with pytest.raises(KeyError):
            manager.decide(LabelDecision(77, CATEGORY_TEMPORARY_ANOMALY))
        with pytest.raises(DataError):
            manager.decide(LabelDecision(cid + 1, "NONSENSE"))
        if len(clusters) > 1:
            with pytest.raises(FileExistsError):
                manager.decide(LabelDecision(clusters[1].cluster_id,
                                             CATEGORY_MALICIOUS,
                                             new_class_name="zero_day"))
        taken = base_env["known"][0]
        other = [pc for pc in clusters if pc.decision is None]
        if other:
            with pytest.raises(FileExistsError):
                manager.decide(LabelDecision(other[0].cluster_id,
                                             CATEGORY_MALICIOUS,
                                             new_class_name=taken))

    def test_decision_logged(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        clusters = _cluster_novelties(manager, base_env)
        manager.decide(LabelDecision(clusters[0].cluster_id,
                                     CATEGORY_MALICIOUS,
                                     new_class_name="zero_day",
                                     analyst="ada"))
        records = manager.deployment.decision_log.replay()
        assert len(records) == 1
        assert records[0]["analyst"] == "ada"
        assert records[0]["generation"] == 0
        assert records[0]["timestamp"] > 0

    def test_retrain_without_decisions_fails_soft(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        report = manager.retrain()
        assert not report.ok
        assert "no decided clusters" in report.error
        assert manager.phase == PHASE_SERVING

    def test_retrain_swaps_model(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        clusters = _cluster_novelties(manager, base_env)
        manager.decide(LabelDecision(clusters[0].cluster_id,
                                     CATEGORY_MALICIOUS,
                                     new_class_name="zero_day"))
        before_hash = manager.active_info()["hash"]
        report = manager.retrain()
        assert report.ok, report.error
        assert report.generation == 1
        assert "zero_day" in report.class_list
        assert "zero_day" in manager.model.class_list
        assert manager.active_info()["hash"] != before_hash
        assert manager.active_info()["generation"] == 1
        assert manager.phase == PHASE_SERVING
        assert manager.pending == []
        assert report.val_accuracy >= 0.3
        # the grown flow set becomes the next retrain's base
        assert any(f.label == "zero_day" for f in manager.base_flows)

    def test_failed_retrain_keeps_everything(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        clusters = _cluster_novelties(manager, base_env)
        manager.decide(LabelDecision(clusters[0].cluster_id,
                                     CATEGORY_MALICIOUS,
                                     new_class_name="zero_day"))
        before_hash = manager.active_info()["hash"]
        before_model = manager.model
        report = manager.retrain(min_val_accuracy=2.0)
        assert not report.ok
        assert "below" in report.error
        assert manager.active_info()["hash"] == before_hash
        assert manager.model is before_model
        assert manager.phase == PHASE_SERVING
        assert len(manager.pending) == len(clusters)
        assert manager.status()["last_retrain"]["ok"] is False

    def test_concurrent_retrain_refused(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        assert manager._retrain_lock.acquire(blocking=False)
        try:
            with pytest.raises(RuntimeError):
                manager.retrain()
        finally:
            manager._retrain_lock.release()

    def test_status_shape(self, base_env, tmp_path):
        manager = make_manager(base_env, tmp_path)
        status = manager.status()
        assert status["generation"] == 0
        assert status["class_list"] == base_env["known"]
        assert status["buffer_size"] == 0
        assert status["decided_clusters"] == 0
        assert status["last_retrain"] is None
        assert len(status["checkpoint_hash"]) == 64


class TestTrainFullModel:
    def test_stray_labels_refused_for_plain_doc(self, base_env):
        flows = base_env["base"]
        with pytest.raises(DataError):
            train_full_model(flows, base_env["known"], "doc",
                             quick_cfg(1), arch=small_arch(3))

    def test_arch_resized_to_class_count(self, base_env):
        known = base_env["known"]
        flows = [f for f in base_env["base"] if f.label in known[:2]]
        result = train_full_model(flows, known[:2], "doc", quick_cfg(1),
                                  arch=small_arch(5), seed=0)
        assert result["model"].arch.n_classes == 2
        assert result["val_accuracy"] == 1.0
