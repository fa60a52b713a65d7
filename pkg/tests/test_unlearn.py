"""
遗忘方法测试

相似标签、随机标签、AGR 权重、各方法的等价关系与确定性、梯度方向诊断。
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.data import Partition, SplitSpec, generate_gaussian_blobs, split
from src.errors import ConfigError, EmptySetError, LabelError
from src.metrics import accuracy, per_sample_losses
from src.nn_core import SgdConfig, build_mlp, fit
from src.quant import QuantSpec
from src.unlearn import (
    UnlearnConfig,
    _all_indices,
    _fixed_labels,
    _random_label_schedule,
    _similar_label_schedule,
    _unlearning_loop,
    agr_weights_from_norms,
    assign_similar_labels,
    cosine,
    draw_random_labels,
    l1_sparse,
    l1_subgradient,
    finetune_ft,
    gradient_ascent_ga,
    measure_label_gradient_alignment,
    qmul_unlearn,
    random_labels_rl,
    retrain,
    run_unlearning,
    saliency_mask,
    salun,
    similar_labels_from_probs,
)

TRAIN = SgdConfig(learning_rate=0.1, batch_size=16, epochs=5, seed=3)


@pytest.fixture(scope="module")
def blobs():
    data = generate_gaussian_blobs(classes=3, per_class=40, dim=4, spread=0.3, seed=0)
    partition = split(data.train, SplitSpec(mode="random", fraction=0.1, seed=1))
    return data.train, partition


@pytest.fixture(scope="module")
def quantized_model(blobs):
    train, _ = blobs
    model = build_mlp(4, [8], 3, quant=QuantSpec(bits=4), seed=3)
    return fit(model, train.features, train.labels, TRAIN)


@pytest.fixture(scope="module")
def float_model(blobs):
    train, _ = blobs
    return fit(build_mlp(4, [8], 3, seed=3), train.features, train.labels, TRAIN)


def _config(method: str, **kwargs) -> UnlearnConfig:
    defaults = dict(epochs=3, learning_rate=0.05, batch_size=16, seed=5)
    defaults.update(kwargs)
    return UnlearnConfig(method=method, **defaults)


def _oracle_similar(probs: np.ndarray, label: int) -> int:
    best, best_distance = None, None
    for k in range(len(probs)):
        if k == label:
            continue
        distance = abs(probs[k] - probs[label])
        if best_distance is None or distance < best_distance:
            best, best_distance = k, distance
    return best


class TestSimilarLabels:
    """相似标签选择"""

    def test_nearest_probability(self):
        result = similar_labels_from_probs(np.array([[0.5, 0.3, 0.2]]), np.array([0]))
        assert result.labels.tolist() == [1]
        assert result.distances[0] == pytest.approx(0.2)

    def test_tie_breaks_to_lowest_index(self):
        probs = np.array([[0.25, 0.5, 0.75], [0.25, 0.25, 0.5]])
        assert similar_labels_from_probs(probs, np.array([1, 2])).labels.tolist() == [0, 0]

    def test_never_returns_true_label(self):
        probs = np.array([[0.9, 0.05, 0.05], [0.1, 0.1, 0.8]])
        chosen = similar_labels_from_probs(probs, np.array([1, 0])).labels
        assert chosen.tolist() == [2, 1]

    def test_single_class_rejected(self):
        with pytest.raises(LabelError):
            similar_labels_from_probs(np.ones((2, 1)), np.array([0, 0]))

    @settings(max_examples=150, deadline=None)
    @given(data=st.data(), classes=st.sampled_from([2, 5, 20]))
    def test_matches_brute_force(self, data, classes):
        """与逐类比较的暴力实现一致"""
        rows = data.draw(st.integers(min_value=1, max_value=8))
        raw = data.draw(st.lists(
            st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=classes, max_size=classes),
            min_size=rows, max_size=rows,
        ))
        probs = np.array(raw)
        labels = np.array(data.draw(st.lists(
            st.integers(min_value=0, max_value=classes - 1), min_size=rows, max_size=rows
        )))
        chosen = similar_labels_from_probs(probs, labels).labels
        assert chosen.tolist() == [_oracle_similar(probs[i], int(labels[i])) for i in range(rows)]

    def test_only_forget_samples_relabelled(self, blobs, quantized_model):
        train, partition = blobs
        relabelled, assignment = assign_similar_labels(quantized_model, train, partition)
        np.testing.assert_array_equal(relabelled.labels[partition.retain_idx], train.labels[partition.retain_idx])
        assert np.all(relabelled.labels[partition.forget_idx] != train.labels[partition.forget_idx])
        assert assignment.labels.shape == partition.forget_idx.shape


class TestRandomLabels:
    """随机替代标签"""

    def test_differs_from_true_label(self):
        labels = np.array([0, 1, 2, 3] * 50)
        drawn = draw_random_labels(labels, 4, np.random.default_rng(0))
        assert np.all(drawn != labels)
        assert drawn.min() >= 0 and drawn.max() <= 3

    def test_covers_all_other_classes(self):
        drawn = draw_random_labels(np.zeros(300, dtype=np.int64), 3, np.random.default_rng(1))
        assert set(drawn.tolist()) == {1, 2}

    def test_single_class_rejected(self):
        with pytest.raises(LabelError):
            draw_random_labels(np.zeros(3, dtype=np.int64), 1, np.random.default_rng(0))


class TestLabelRefresh:
    """替代标签的刷新时机"""

    def test_random_once_reuses_first_draw(self, blobs, quantized_model):
        train, partition = blobs
        schedule = _random_label_schedule(train, partition, _config("rl", label_refresh="once"))
        first = schedule(0, quantized_model).copy()
        np.testing.assert_array_equal(schedule(3, quantized_model), first)

    def test_random_per_epoch_redraws(self, blobs, quantized_model):
        train, partition = blobs
        schedule = _random_label_schedule(train, partition, _config("rl", label_refresh="per_epoch"))
        first = schedule(0, quantized_model).copy()
        later = [schedule(epoch, quantized_model).copy() for epoch in range(1, 5)]
        assert any(not np.array_equal(labels, first) for labels in later)
        for labels in later:
            np.testing.assert_array_equal(labels[partition.retain_idx], train.labels[partition.retain_idx])

    def test_similar_once_ignores_updated_model(self, blobs, quantized_model, float_model):
        train, partition = blobs
        schedule = _similar_label_schedule(train, partition, _config("qmul", label_refresh="once"))
        first = schedule(0, quantized_model).copy()
        np.testing.assert_array_equal(schedule(1, float_model), first)

    def test_similar_per_epoch_follows_current_model(self, blobs, quantized_model, float_model):
        train, partition = blobs
        schedule = _similar_label_schedule(train, partition, _config("qmul", label_refresh="per_epoch"))
        schedule(0, quantized_model)
        expected, _ = assign_similar_labels(float_model, train, partition)
        np.testing.assert_array_equal(schedule(1, float_model), expected.labels)


class TestAgrWeights:
    """自适应梯度重加权"""

    def test_values(self):
        weights = agr_weights_from_norms(1.0, 3.0)
        assert weights.alpha_f == pytest.approx(0.75)
        assert weights.alpha_r == pytest.approx(0.25)

    def test_zero_norms_fall_back(self):
        weights = agr_weights_from_norms(0.0, 0.0)
        assert (weights.alpha_f, weights.alpha_r) == (0.5, 0.5)

    @settings(max_examples=200, deadline=None)
    @given(
        g_f=st.floats(min_value=1e-6, max_value=1e6),
        g_r=st.floats(min_value=1e-6, max_value=1e6),
    )
    def test_identities(self, g_f, g_r):
        """α_f + α_r = 1，且 α_f·G_f = α_r·G_r"""
        weights = agr_weights_from_norms(g_f, g_r)
        assert weights.alpha_f + weights.alpha_r == pytest.approx(1.0)
        assert weights.alpha_f * g_f == pytest.approx(weights.alpha_r * g_r, rel=1e-9)
        assert 0.0 <= weights.alpha_f <= 1.0


class TestSaliencyAndPenalty:
    """SalUn 掩码与 ℓ1 次梯度"""

    def test_top_fraction_selected(self):
        masks = saliency_mask([np.array([1.0, -3.0]), np.array([[2.0, 0.0]])], 0.5)
        np.testing.assert_array_equal(masks[0], [0.0, 1.0])
        np.testing.assert_array_equal(masks[1], [[1.0, 0.0]])

    def test_ties_prefer_earlier_entries(self):
        masks = saliency_mask([np.ones(4)], 0.5)
        np.testing.assert_array_equal(masks[0], [1.0, 1.0, 0.0, 0.0])

    def test_rounding_up(self):
        masks = saliency_mask([np.arange(4.0)], 0.25)
        np.testing.assert_array_equal(masks[0], [0.0, 0.0, 0.0, 1.0])

    def test_full_sparsity_selects_all(self):
        masks = saliency_mask([np.zeros(3), np.zeros((2, 2))], 1.0)
        assert all(np.all(mask == 1.0) for mask in masks)

    def test_l1_subgradient(self):
        result = l1_subgradient([np.array([-2.0, 0.0, 3.0]), np.array([5.0])], 0.1, skip=[False, True])
        np.testing.assert_allclose(result[0], [-0.1, 0.0, 0.1])
        np.testing.assert_array_equal(result[1], [0.0])


class TestMethods:
    """各方法的行为与等价关系"""

    @pytest.mark.parametrize("method", ["ft", "ga", "rl", "l1_sparse", "salun", "qmul"])
    def test_zero_epochs_is_identity(self, blobs, quantized_model, method):
        train, partition = blobs
        result = run_unlearning(quantized_model, train, partition, _config(method, epochs=0))
        assert result.model.fingerprint() == quantized_model.fingerprint()
        assert result.diagnostics == []

    @pytest.mark.parametrize("method", ["ft", "rl", "qmul"])
    def test_input_model_untouched(self, blobs, quantized_model, method):
        train, partition = blobs
        before = quantized_model.fingerprint()
        run_unlearning(quantized_model, train, partition, _config(method))
        assert quantized_model.fingerprint() == before

    @pytest.mark.parametrize("method", ["rl", "salun", "qmul"])
    def test_deterministic(self, blobs, quantized_model, method):
        train, partition = blobs
        first = run_unlearning(quantized_model, train, partition, _config(method))
        second = run_unlearning(quantized_model, train, partition, _config(method))
        assert first.model.fingerprint() == second.model.fingerprint()
        assert [d.to_dict() for d in first.diagnostics] == [d.to_dict() for d in second.diagnostics]

    def test_salun_full_sparsity_equals_rl(self, blobs, quantized_model):
        """ρ = 1 时 SalUn 与 RL 完全一致"""
        train, partition = blobs
        rl = random_labels_rl(quantized_model, train, partition, _config("rl"))
        full = salun(quantized_model, train, partition, _config("salun", sparsity=1.0))
        assert full.model.fingerprint() == rl.model.fingerprint()

    def test_l1_zero_gamma_equals_ft(self, blobs, quantized_model):
        """γ = 0 时 ℓ1-sparse 与 FT 完全一致"""
        train, partition = blobs
        ft = finetune_ft(quantized_model, train, partition, _config("ft"))
        sparse = l1_sparse(quantized_model, train, partition, _config("l1_sparse", gamma=0.0))
        assert sparse.model.fingerprint() == ft.model.fingerprint()

    def test_l1_penalty_changes_result(self, blobs, quantized_model):
        train, partition = blobs
        ft = finetune_ft(quantized_model, train, partition, _config("ft"))
        sparse = l1_sparse(quantized_model, train, partition, _config("l1_sparse", gamma=0.01))
        assert sparse.model.fingerprint() != ft.model.fingerprint()

    def test_fixed_half_weights_equal_uniform_at_half_rate(self, blobs, quantized_model):
        """关闭 AGR 的 Q-MUL（0.5 权重、学习率 2η）等价于无权重、学习率 η 的相似标签训练"""
        train, partition = blobs
        ablated = qmul_unlearn(
            quantized_model, train, partition, _config("qmul", adaptive_reweighting=False, learning_rate=0.1)
        )
        uniform_config = _config("qmul", adaptive_reweighting=False, learning_rate=0.05)
        uniform = _unlearning_loop(
            quantized_model.clone(), train, partition, uniform_config,
            train_idx=_all_indices(train),
            epoch_labels=_similar_label_schedule(train, partition, uniform_config),
            effective_alphas=(0.5, 0.5),
            weight_samples=False,
        )
        for a, b in zip(ablated.model.parameters(), uniform.model.parameters()):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_qmul_once_trains_on_initial_similar_labels(self, blobs, quantized_model):
        """label_refresh=once 时整个过程只用初始模型给出的相似标签"""
        train, partition = blobs
        ablated = qmul_unlearn(
            quantized_model, train, partition,
            _config("qmul", adaptive_reweighting=False, label_refresh="once", learning_rate=0.1),
        )
        relabelled, _ = assign_similar_labels(quantized_model, train, partition)
        frozen_config = _config("qmul", adaptive_reweighting=False, label_refresh="once", learning_rate=0.05)
        frozen = _unlearning_loop(
            quantized_model.clone(), train, partition, frozen_config,
            train_idx=_all_indices(train),
            epoch_labels=_fixed_labels(relabelled),
            effective_alphas=(0.5, 0.5),
            weight_samples=False,
        )
        for a, b in zip(ablated.model.parameters(), frozen.model.parameters()):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_rl_once_keeps_forget_gradient_fixed(self, blobs, quantized_model):
        """学习率为 0 时模型不变，G_f 只随标签变化"""
        train, partition = blobs
        once = random_labels_rl(
            quantized_model, train, partition, _config("rl", epochs=4, learning_rate=0.0, label_refresh="once")
        )
        per_epoch = random_labels_rl(
            quantized_model, train, partition, _config("rl", epochs=4, learning_rate=0.0, label_refresh="per_epoch")
        )
        assert len({d.g_f for d in once.diagnostics}) == 1
        assert len({d.g_f for d in per_epoch.diagnostics}) > 1

    def test_finetune_does_not_lower_retain_accuracy(self, blobs):
        """从欠训练的模型出发，FT 后保留集准确率不下降"""
        train, partition = blobs
        undertrained = fit(
            build_mlp(4, [8], 3, seed=3), train.features, train.labels,
            SgdConfig(learning_rate=0.02, batch_size=16, epochs=1, seed=3),
        )
        retain = train.subset(partition.retain_idx)
        before = accuracy(undertrained, retain.features, retain.labels)
        result = finetune_ft(undertrained, train, partition, _config("ft", epochs=10, learning_rate=0.1))
        assert accuracy(result.model, retain.features, retain.labels) >= before

    def test_gradient_ascent_lowers_forget_accuracy(self, blobs, float_model):
        train, partition = blobs
        forget = train.subset(partition.forget_idx)
        before = accuracy(float_model, forget.features, forget.labels)
        result = gradient_ascent_ga(
            float_model, train, partition, _config("ga", epochs=30, learning_rate=0.5, batch_size=64)
        )
        assert accuracy(result.model, forget.features, forget.labels) < before

    def test_gradient_ascent_raises_forget_loss(self, blobs, float_model):
        train, partition = blobs
        forget = train.subset(partition.forget_idx)
        before = per_sample_losses(float_model, forget.features, forget.labels).mean()
        result = gradient_ascent_ga(float_model, train, partition, _config("ga", learning_rate=0.1, batch_size=64))
        after = per_sample_losses(result.model, forget.features, forget.labels).mean()
        assert after > before

    def test_qmul_diagnostics(self, blobs, quantized_model):
        """每轮一条诊断，α_f + α_r = 1，且 α_f·G_f = α_r·G_r"""
        train, partition = blobs
        result = qmul_unlearn(quantized_model, train, partition, _config("qmul", epochs=4))
        assert [d.epoch for d in result.diagnostics] == [0, 1, 2, 3]
        for d in result.diagnostics:
            assert d.alpha_f + d.alpha_r == pytest.approx(1.0)
            assert d.alpha_f * d.g_f == pytest.approx(d.alpha_r * d.g_r)
            assert d.ratio == pytest.approx(d.g_f / d.g_r)

    def test_baseline_diagnostics_record_fixed_alphas(self, blobs, quantized_model):
        train, partition = blobs
        result = finetune_ft(quantized_model, train, partition, _config("ft", epochs=2))
        assert [(d.alpha_f, d.alpha_r) for d in result.diagnostics] == [(0.0, 1.0), (0.0, 1.0)]

    def test_diagnostics_can_be_disabled(self, blobs, quantized_model):
        train, partition = blobs
        result = qmul_unlearn(quantized_model, train, partition, _config("qmul", record_diagnostics=False))
        assert result.diagnostics == []

    def test_qmul_needs_both_subsets(self, blobs, quantized_model):
        train, _ = blobs
        everything = Partition(forget_idx=np.arange(train.size), retain_idx=np.zeros(0, dtype=np.int64))
        with pytest.raises(EmptySetError):
            qmul_unlearn(quantized_model, train, everything, _config("qmul"))

    def test_qmul_rejects_other_method(self, blobs, quantized_model):
        train, partition = blobs
        with pytest.raises(ConfigError):
            qmul_unlearn(quantized_model, train, partition, _config("ft"))

    def test_retrain_not_dispatched(self, blobs, quantized_model):
        train, partition = blobs
        with pytest.raises(ConfigError):
            run_unlearning(quantized_model, train, partition, _config("retrain"))

    def test_retrain_with_empty_forget_set_matches_original(self, blobs):
        """遗忘集为空时 Retrain 与原始训练逐位一致"""
        train, _ = blobs
        nothing = Partition(forget_idx=np.zeros(0, dtype=np.int64), retain_idx=np.arange(train.size))
        reference = retrain(train, nothing, TRAIN, [8])
        original = fit(build_mlp(4, [8], 3, seed=TRAIN.seed), train.features, train.labels, TRAIN)
        assert reference.fingerprint() == original.fingerprint()


class TestAlignment:
    """梯度方向诊断"""

    def test_cosine(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == (0.0, False)
        value, degenerate = cosine(np.array([1.0, 2.0]), np.array([2.0, 4.0]))
        assert value == pytest.approx(1.0) and not degenerate
        assert cosine(np.zeros(2), np.array([1.0, 0.0])) == (0.0, True)

    def test_self_comparison_is_one(self, blobs, float_model):
        """与原始标签自比时余弦为 1"""
        train, partition = blobs
        report = measure_label_gradient_alignment(
            float_model, train, partition, seed=0, compare_labels=train.labels[partition.forget_idx]
        )
        healthy = ~report.degenerate_sl
        assert healthy.any()
        np.testing.assert_allclose(report.cos_sl[healthy], 1.0, atol=1e-9)

    def test_report_shapes_and_ranges(self, blobs, quantized_model):
        train, partition = blobs
        report = measure_label_gradient_alignment(quantized_model, train, partition, seed=4)
        count = partition.forget_idx.size
        assert report.cos_sl.shape == (count,) and report.cos_rl.shape == (count,)
        assert np.all(np.abs(report.cos_sl) <= 1.0 + 1e-12)
        assert np.all(report.random_labels != train.labels[partition.forget_idx])
        assert np.all(report.similar_labels != train.labels[partition.forget_idx])
        assert -1.0 <= report.mean_rl <= 1.0
