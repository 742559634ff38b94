"""Open-set decision rules: thresholding, tail fitting, recalibration."""

from __future__ import annotations

import time

import numpy as np
import pytest

from adaptids.errors import ConfigError, DataError
from adaptids.flows import FlowTensor, LabeledFlow
from adaptids.heads import (KIND_DOC, KIND_DOCPP, KIND_OPENMAX,
                            RESERVED_TRAIN_LABEL, UNKNOWN, OpenMaxConfig,
                            OpenSetModel, OpenSetVerdict, WeibullTailModel,
                            activation_distance, doc_predict,
                            docpp_prepare_targets, evaluate_open_set,
                            fit_openmax_tails, fit_weibull, openmax_fit,
                            openmax_predict, openmax_recalibrate,
                            resolve_thresholds, weibull_cdf)
from adaptids.model import (HEAD_SIGMOID, HEAD_SOFTMAX, Architecture,
                            TrainConfig, build_targets, init_params, train)

TINY = Architecture(input_dim=60, conv_width=10, conv_channels=3,
                    conv_stride=5, fc1_units=8, n_classes=3)


class TestDocPredict:
    def test_score_at_threshold_passes(self):
        v = doc_predict(np.array([[0.5, 0.1]]), ["a", "b"], 0.5)
        assert v[0].decision == "a"

    def test_all_below_threshold_rejects(self):
        v = doc_predict(np.array([[0.49, 0.2]]), ["a", "b"], 0.5)
        assert v[0].decision == UNKNOWN

    def test_highest_passing_wins_not_highest_overall(self):
        # a scores higher but misses its own bar; b passes
        th = {"a": 0.95, "b": 0.25}
        v = doc_predict(np.array([[0.9, 0.3]]), ["a", "b"], th)
        assert v[0].decision == "b"

    def test_two_passing_highest_wins(self):
        v = doc_predict(np.array([[0.7, 0.9]]), ["a", "b"], 0.5)
        assert v[0].decision == "b"

    def test_per_class_threshold_missing_class(self):
        with pytest.raises(ConfigError):
            doc_predict(np.array([[0.7, 0.9]]), ["a", "b"], {"a": 0.5})

    def test_score_count_mismatch(self):
        with pytest.raises(DataError):
            doc_predict(np.array([[0.7, 0.9, 0.1]]), ["a", "b"], 0.5)

    def test_head_kind_carried(self):
        v = doc_predict(np.array([[0.7]]), ["a"], 0.5, head_kind=KIND_DOCPP)
        assert v[0].head_kind == KIND_DOCPP

    def test_resolve_thresholds_global(self):
        np.testing.assert_array_equal(resolve_thresholds(0.4, ["a", "b"]),
                                      [0.4, 0.4])


class TestDocppTargets:
    def test_reserved_rows_are_zero(self):
        t = docpp_prepare_targets(["a", RESERVED_TRAIN_LABEL, "b"],
                                  ["a", "b"])
        np.testing.assert_array_equal(t, [[1, 0], [0, 0], [0, 1]])

    def test_two_stray_labels_refused(self):
        with pytest.raises(DataError) as err:
            docpp_prepare_targets(["a", "x", "y"], ["a"])
        assert "one reserved label" in str(err.value)

    def test_misnamed_stray_suggests_rename(self):
        with pytest.raises(DataError) as err:
            docpp_prepare_targets(["a", "zeroday"], ["a"])
        assert RESERVED_TRAIN_LABEL in str(err.value)


def _weibull_sample(shape, scale, n, seed):
    u = np.random.default_rng(seed).random(n)
    return scale * (-np.log(u)) ** (1.0 / shape)


def _weibull_ll(x, shape, scale):
    z = x / scale
    return (len(x) * np.log(shape / scale)
            + (shape - 1.0) * np.log(z).sum() - (z ** shape).sum())


class TestWeibullFit:
    def test_parameter_recovery(self):
        start = time.monotonic()
        for true_shape, true_scale, seed in [(0.8, 2.0, 1), (1.5, 0.5, 2),
                                             (3.0, 10.0, 3), (7.0, 1.0, 4)]:
            x = _weibull_sample(true_shape, true_scale, 1000, seed)
            shape, scale = fit_weibull(x)
            assert abs(shape - true_shape) / true_shape < 0.10
            assert abs(scale - true_scale) / true_scale < 0.10
        assert time.monotonic() - start < 5.0

    def test_fit_is_a_likelihood_maximum(self):
        x = _weibull_sample(2.2, 3.3, 400, seed=9)
        shape, scale = fit_weibull(x)
        best = _weibull_ll(x, shape, scale)
        for ds in (0.95, 1.05):
            assert _weibull_ll(x, shape * ds, scale) <= best + 1e-9
            assert _weibull_ll(x, shape, scale * ds) <= best + 1e-9

    def test_scale_invariance(self):
        x = _weibull_sample(1.7, 1.0, 300, seed=5)
        s1, l1 = fit_weibull(x)
        s2, l2 = fit_weibull(x * 1000.0)
        assert s2 == pytest.approx(s1, rel=1e-9)
        assert l2 == pytest.approx(l1 * 1000.0, rel=1e-9)

    def test_degenerate_inputs(self):
        assert fit_weibull([2.0, 2.0, 2.0]) == (1.0, 1e-8)
        assert fit_weibull([3.0]) == (1.0, 1e-8)
        assert fit_weibull([-1.0, -2.0, 0.0]) == (1.0, 1e-8)

    def test_negative_samples_ignored(self):
        x = _weibull_sample(2.0, 1.0, 500, seed=7)
        with_junk = np.concatenate([x, [-5.0, 0.0, -0.1]])
        assert fit_weibull(with_junk) == fit_weibull(x)


class TestWeibullCdf:
    def test_zero_at_and_below_shift(self):
        assert weibull_cdf(3.0, 2.0, 1.0, shift=3.0) == 0.0
        assert weibull_cdf(2.5, 2.0, 1.0, shift=3.0) == 0.0

    def test_known_point(self):
        # one scale past the shift: 1 - e^-1 regardless of shape sign
        for shape in (0.5, 1.0, 4.0):
            got = weibull_cdf(4.0, shape, 1.0, shift=3.0)
            assert got == pytest.approx(1.0 - np.exp(-1.0))

    def test_monotone(self):
        d = np.linspace(0.0, 10.0, 200)
        c = weibull_cdf(d, 1.8, 2.0, shift=1.0)
        assert np.all(np.diff(c) >= 0.0)
        assert np.all((c >= 0.0) & (c < 1.0))


def _far_models(class_list, scale=1e-6, shift=0.0):
    """Tail models whose CDF is effectively 1 at any real distance."""
    return {c: WeibullTailModel(mav=np.full(len(class_list), 100.0),
                                shape=1.0, scale=scale, shift=shift,
                                tail_size=5)
            for c in class_list}


class TestOpenMax:
    def test_full_shave_hand_values(self):
        classes = ["a", "b", "c"]
        models = _far_models(classes)
        cfg = OpenMaxConfig(tail_size=5, alpha=2)
        v_hat, unk = openmax_recalibrate(np.array([3.0, 2.0, 1.0]),
                                         classes, models, cfg)
        # rank 0 keeps nothing, rank 1 keeps half, third is untouched
        np.testing.assert_allclose(v_hat, [0.0, 1.0, 1.0])
        assert unk == pytest.approx(4.0)

    def test_nothing_shaved_when_tail_unreached(self):
        classes = ["a", "b"]
        models = _far_models(classes, shift=1e9)
        cfg = OpenMaxConfig(tail_size=5, alpha=2)
        v = np.array([2.0, -1.0])
        v_hat, unk = openmax_recalibrate(v, classes, models, cfg)
        np.testing.assert_array_equal(v_hat, v)
        assert unk == 0.0

    def test_mass_conservation_random(self):
        rng = np.random.default_rng(3)
        classes = [f"c{i}" for i in range(4)]
        acts = {c: rng.normal(size=(30, 4)) for c in classes}
        cfg = OpenMaxConfig(tail_size=10, alpha=3)
        models = openmax_fit(acts, cfg)
        for _ in range(200):
            v = rng.normal(scale=3.0, size=4)
            v_hat, unk = openmax_recalibrate(v, classes, models, cfg)
            assert v_hat.sum() + unk == pytest.approx(v.sum(), abs=1e-9)

    def test_alpha_clamped_to_class_count(self):
        classes = ["a", "b"]
        models = _far_models(classes)
        cfg = OpenMaxConfig(tail_size=5, alpha=10)
        v_hat, unk = openmax_recalibrate(np.array([4.0, 2.0]),
                                         classes, models, cfg)
        # ranks over just two classes: weights 1 and 1/2
        np.testing.assert_allclose(v_hat, [0.0, 1.0])
        assert unk == pytest.approx(5.0)

    def test_fit_requires_tail_size_samples(self):
        cfg = OpenMaxConfig(tail_size=10, alpha=2)
        acts = {"a": np.random.default_rng(0).normal(size=(9, 3))}
        with pytest.raises(DataError) as err:
            openmax_fit(acts, cfg)
        assert "'a'" in str(err.value)

    def test_fit_shift_is_tail_minimum(self):
        rng = np.random.default_rng(1)
        acts = {"a": rng.normal(size=(25, 3))}
        cfg = OpenMaxConfig(tail_size=8, alpha=1)
        model = openmax_fit(acts, cfg)["a"]
        assert model.cdf(model.shift) == 0.0
        assert model.cdf(model.shift + 1e-6) > 0.0

    def test_predict_unknown_wins(self):
        classes = ["a", "b", "c"]
        models = _far_models(classes)
        cfg = OpenMaxConfig(tail_size=5, alpha=2, threshold=0.5)
        v = openmax_predict(np.array([[3.0, 2.0, 1.0]]), classes, models,
                            cfg)
        assert v[0].decision == UNKNOWN
        assert v[0].unknown_score == pytest.approx(
            1.0 - v[0].scores.sum(), abs=1e-12)

    def test_predict_threshold_rejects_weak_winner(self):
        classes = ["a", "b", "c"]
        models = _far_models(classes, shift=1e9)   # nothing shaved
        flat = np.array([[2.0, 1.9, 1.8]])
        strict = OpenMaxConfig(tail_size=5, alpha=2, threshold=0.5)
        lax = OpenMaxConfig(tail_size=5, alpha=2, threshold=0.2)
        assert openmax_predict(flat, classes, models,
                               strict)[0].decision == UNKNOWN
        assert openmax_predict(flat, classes, models,
                               lax)[0].decision == "a"

    def test_missing_tail_model(self):
        cfg = OpenMaxConfig(tail_size=5, alpha=1)
        with pytest.raises(DataError):
            openmax_recalibrate(np.zeros(2), ["a", "b"],
                                _far_models(["a"]), cfg)

    def test_roundtrip_dict(self):
        m = _far_models(["a"])["a"]
        again = WeibullTailModel.from_dict(m.to_dict())
        assert again.shape == m.shape and again.scale == m.scale
        np.testing.assert_allclose(again.mav, m.mav)


class TestDistances:
    def test_euclidean(self):
        assert activation_distance([0.0, 3.0], [4.0, 0.0],
                                   "euclidean") == pytest.approx(5.0)

    def test_cosine_orthogonal_and_parallel(self):
        assert activation_distance([1.0, 0.0], [0.0, 2.0],
                                   "cosine") == pytest.approx(1.0)
        assert activation_distance([1.0, 1.0], [2.0, 2.0],
                                   "cosine") == pytest.approx(0.0)

    def test_cosine_zero_vector(self):
        assert activation_distance([0.0, 0.0], [1.0, 0.0], "cosine") == 1.0

    def test_eucos_combines(self):
        d = activation_distance([0.0, 3.0], [4.0, 0.0], "eucos")
        assert d == pytest.approx(5.0 / 200.0 + 1.0)


def _tiny_trained(head_kind):
    """Train the small net on content-distinct patterns."""
    shapes = [np.linspace(0.2, 1.0, 10), np.linspace(1.0, 0.2, 10),
              np.tile([1.0, 0.1], 5)]
    rng = np.random.default_rng(8)
    x, labels = [], []
    for k in range(3):
        for _ in range(40):
            row = rng.random(TINY.input_dim) * 0.1
            pos = int(rng.integers(0, 5)) * TINY.conv_stride
            row[pos:pos + 10] += shapes[k]
            x.append(row)
            labels.append("abc"[k])
    x = np.array(x, dtype=np.float32)
    class_list = ["a", "b", "c"]
    train_head = HEAD_SOFTMAX if head_kind == KIND_OPENMAX else HEAD_SIGMOID
    targets = build_targets(labels, class_list, train_head)
    params = train(init_params(TINY, seed=2), x, targets, TINY, train_head,
                   TrainConfig(epochs=80, batch_size=16, learning_rate=1e-2))
    cfg = OpenMaxConfig(tail_size=10, alpha=2) \
        if head_kind == KIND_OPENMAX else None
    model = OpenSetModel(arch=TINY, params=params, class_list=class_list,
                         head_kind=head_kind, openmax_cfg=cfg)
    return model, x, labels


class TestOpenSetModel:
    def test_train_head_mapping(self):
        params = init_params(TINY, seed=0)
        m = OpenSetModel(arch=TINY, params=params, class_list=list("abc"),
                         head_kind=KIND_DOC)
        assert m.train_head == HEAD_SIGMOID
        m2 = OpenSetModel(arch=TINY, params=params, class_list=list("abc"),
                          head_kind=KIND_OPENMAX,
                          openmax_cfg=OpenMaxConfig())
        assert m2.train_head == HEAD_SOFTMAX

    def test_class_count_mismatch(self):
        with pytest.raises(ConfigError):
            OpenSetModel(arch=TINY, params=init_params(TINY, seed=0),
                         class_list=["a", "b"], head_kind=KIND_DOC)

    def test_unknown_head_kind(self):
        with pytest.raises(ConfigError):
            OpenSetModel(arch=TINY, params=init_params(TINY, seed=0),
                         class_list=list("abc"), head_kind="closedmax")

    def test_openmax_without_tails_refuses_predict(self):
        m = OpenSetModel(arch=TINY, params=init_params(TINY, seed=0),
                         class_list=list("abc"), head_kind=KIND_OPENMAX,
                         openmax_cfg=OpenMaxConfig())
        with pytest.raises(ConfigError):
            m.predict(np.zeros((1, TINY.input_dim), dtype=np.float32))

    def test_signatures_are_pre_squash(self):
        m, x, _ = _tiny_trained(KIND_DOC)
        sig = m.signatures(x[:5])
        assert sig.shape == (5, 3)
        assert (sig < 0).any() or (sig > 1).any()
        np.testing.assert_array_equal(m.particularized(x[:5]), sig)

    def test_fit_tails_and_predict(self):
        m, x, labels = _tiny_trained(KIND_OPENMAX)
        fit_openmax_tails(m, x, labels)
        assert sorted(m.weibull) == ["a", "b", "c"]
        verdicts = m.predict(x[:30])
        hits = sum(v.decision == l for v, l in zip(verdicts, labels[:30]))
        assert hits >= 25
        part = m.particularized(x[:5])
        assert part.shape == (5, 3)

    def test_docpp_rejects_flat_noise(self):
        m, x, labels = _tiny_trained(KIND_DOCPP)
        verdicts = m.predict(x[:20])
        hits = sum(v.decision == l for v, l in zip(verdicts, labels[:20]))
        assert hits >= 16


def _flow(label):
    return LabeledFlow(tensor=FlowTensor(
        data=np.zeros((100, 200), dtype=np.float32), packet_count=1),
        label=label, source="SYNTHETIC")


class _CannedModel:
    """Stands in for a trained model; returns scripted verdicts."""

    def __init__(self, class_list, decisions):
        self.class_list = class_list
        self._decisions = list(decisions)

    def predict(self, batch):
        out = [OpenSetVerdict(decision=d, scores=np.zeros(2),
                              head_kind=KIND_DOC)
               for d in self._decisions[:batch.shape[0]]]
        del self._decisions[:batch.shape[0]]
        return out


class TestEvaluateOpenSet:
    def test_accuracies_and_counts(self):
        model = _CannedModel(["a", "b"],
                             ["a", "b", "b", UNKNOWN, "a", UNKNOWN])
        known = [_flow("a"), _flow("b"), _flow("a")]
        novel = [_flow("z"), _flow("z"), _flow("z")]
        rec = evaluate_open_set(model, known, novel)
        assert rec.closed_accuracy == {"a": 0.5, "b": 1.0}
        assert rec.rejection_accuracy == {"z": pytest.approx(2.0 / 3.0)}
        assert rec.verdict_counts == {"z": {UNKNOWN: 2, "a": 1}}
        assert rec.n_known == 3 and rec.n_novel == 3

    def test_label_overlap_rejected(self):
        model = _CannedModel(["a"], [])
        with pytest.raises(DataError):
            evaluate_open_set(model, [_flow("a")], [_flow("a")])

    def test_unknown_known_label_rejected(self):
        model = _CannedModel(["a"], [])
        with pytest.raises(DataError):
            evaluate_open_set(model, [_flow("q")], [])

    def test_novelty_inside_class_list_rejected(self):
        model = _CannedModel(["a", "b"], [])
        with pytest.raises(DataError):
            evaluate_open_set(model, [], [_flow("b")])
