import numpy as np
import pytest

from mtl_core.errors import DegenerateInputError, DimensionError, DivergenceError, InsufficientDataError
from mtl_core.tensor import ComputationTape, Tensor
from mtl_core.weighting import (
    LossWindow,
    WeightingState,
    avg_deviation,
    compute_betas,
    load_state_dict,
    parameter_ratio,
    push_loss,
    state_dict,
    weighted_total_loss,
    weighting_rows,
)

COUNTS = {"backbone": 1600, "head:a": 400, "head:b": 400}


def _state(windows, **kwargs):
    state = WeightingState.create(list(windows), **kwargs)
    for task, values in windows.items():
        for v in values:
            push_loss(state, task, v)
    return state


class TestLossWindow:

    def test_evicts_oldest(self):
        w = LossWindow("a", capacity=3)
        for v in [1.0, 2.0, 3.0, 4.0]:
            w.push(v)
        np.testing.assert_array_equal(w.values(), [2.0, 3.0, 4.0])
        assert w.count == 4

    def test_avg_deviation(self):
        w = LossWindow("a")
        for v in [0.0, 0.0, 0.0, 4.0]:
            w.push(v)
        assert avg_deviation(w) == pytest.approx(1.5)

    def test_needs_two_values(self):
        w = LossWindow("a")
        w.push(1.0)
        with pytest.raises(InsufficientDataError):
            avg_deviation(w)

    def test_push_rejects_bad_losses(self):
        state = WeightingState.create(["a"])
        with pytest.raises(DivergenceError):
            push_loss(state, "a", float("nan"))
        with pytest.raises(DegenerateInputError):
            push_loss(state, "a", -0.5)


class TestComputeBetas:

    def test_worked_example(self):
        # r_a = 1 / 2 = 0.5, r_b = 1.5 / 1 = 1.5, mean(r) = 1
        state = _state({"a": [1.0, 3.0], "b": [0.0, 0.0, 0.0, 4.0]})
        ratio = parameter_ratio(COUNTS, ["a", "b"])
        assert ratio == 2.0
        betas = compute_betas(state, {"a": 3.0, "b": 4.0}, COUNTS)
        assert betas["a"] == pytest.approx(2.0 * ratio, rel=1e-12)
        assert betas["b"] == pytest.approx(2.0 / 3.0 * ratio, rel=1e-12)

    def test_lambda_scales_every_weight(self):
        windows = {"a": [1.0, 3.0], "b": [0.0, 0.0, 0.0, 4.0]}
        base = compute_betas(_state(windows), {}, COUNTS)
        scaled = compute_betas(_state(windows, weighting_lambda=0.25), {}, COUNTS)
        for t in base:
            assert scaled[t] == pytest.approx(0.25 * base[t], rel=1e-12)

    def test_warmup_returns_ones(self):
        state = _state({"a": [1.0, 3.0], "b": [2.0, 5.0]}, warmup_epochs=3)
        assert compute_betas(state, {}, COUNTS, epoch=2) == {"a": 1.0, "b": 1.0}
        assert compute_betas(state, {}, COUNTS, epoch=3) != {"a": 1.0, "b": 1.0}

    def test_current_loss_normalizer(self):
        state = _state({"a": [1.0, 3.0], "b": [1.0, 3.0]}, loss_normalizer="current")
        betas = compute_betas(state, {"a": 1.0, "b": 4.0}, COUNTS)
        # r_a = 1, r_b = 0.25: the quieter task gets the larger weight
        assert betas["b"] / betas["a"] == pytest.approx(4.0)

    def test_constant_windows_give_equal_weights(self):
        state = _state({"a": [2.0, 2.0], "b": [5.0, 5.0]})
        betas = compute_betas(state, {}, COUNTS)
        assert betas["a"] == betas["b"] == pytest.approx(2.0)

    def test_constant_window_gets_average_weight(self, caplog):
        state = _state({"a": [1.0, 1.0], "b": [1.0, 2.0]})
        betas = compute_betas(state, {}, COUNTS)
        assert betas == {"a": pytest.approx(2.0), "b": pytest.approx(2.0)}
        assert "no deviation" in caplog.text

    def test_constant_window_does_not_distort_others(self):
        # r_b = 0.5 / 2, r_c = 1.5 / 3: c is twice as volatile as b
        state = _state({"a": [3.0, 3.0, 3.0], "b": [1.5, 2.5], "c": [1.5, 4.5]})
        counts = {**COUNTS, "head:c": 400}
        betas = compute_betas(state, {}, counts)
        ratio = parameter_ratio(counts, ["a", "b", "c"])
        assert betas["a"] == pytest.approx(ratio)
        assert betas["b"] == pytest.approx(ratio * 1.5)
        assert betas["c"] == pytest.approx(ratio * 0.75)

    def test_insufficient_data(self):
        state = _state({"a": [1.0], "b": [1.0]})
        with pytest.raises(InsufficientDataError):
            compute_betas(state, {}, COUNTS)

    def test_tiny_loss_level_is_clamped(self, caplog):
        state = _state({"a": [0.0, 0.0], "b": [1.0, 3.0]})
        betas = compute_betas(state, {}, COUNTS)
        assert all(np.isfinite(list(betas.values())))
        assert "clamped" in caplog.text


class TestBetaProperties:
    """Properties over 10^3 random window sets."""

    @pytest.fixture
    def window_sets(self):
        rng = np.random.default_rng(11)
        sets = []
        for _ in range(1000):
            n_tasks = int(rng.integers(2, 5))
            length = int(rng.integers(2, 12))
            sets.append({f"t{i}": rng.uniform(0.1, 5.0, size=length) for i in range(n_tasks)})
        return sets

    @staticmethod
    def _counts(tasks):
        counts = {"backbone": 1000}
        counts.update({f"head:{t}": 100 + 10 * i for i, t in enumerate(tasks)})
        return counts

    def test_invariant_to_loss_scale(self, window_sets):
        rng = np.random.default_rng(12)
        for windows in window_sets:
            counts = self._counts(windows)
            base = compute_betas(_state(windows), {}, counts)
            c = rng.uniform(0.01, 100.0)
            scaled = compute_betas(_state({t: c * v for t, v in windows.items()}), {}, counts)
            for t in windows:
                assert scaled[t] == pytest.approx(base[t], rel=1e-9)

    def test_reciprocal_weights_sum_to_task_count(self, window_sets):
        for windows in window_sets:
            counts = self._counts(windows)
            betas = compute_betas(_state(windows), {}, counts)
            ratio = parameter_ratio(counts, list(windows))
            assert sum(1.0 / b for b in betas.values()) == pytest.approx(len(windows) / ratio, rel=1e-9)

    def test_more_volatile_task_gets_smaller_weight(self, window_sets):
        rng = np.random.default_rng(13)
        for windows in window_sets[:200]:
            counts = self._counts(windows)
            base = compute_betas(_state(windows), {}, counts)
            task = next(iter(windows))
            values = windows[task]
            if np.ptp(values) == 0.0:
                continue
            noisier = dict(windows)
            noisier[task] = values.mean() + rng.uniform(1.5, 3.0) * (values - values.mean())
            noisier[task] = np.maximum(noisier[task], 0.0)
            if avg_deviation_of(noisier[task]) / noisier[task].mean() <= avg_deviation_of(values) / values.mean():
                continue
            assert compute_betas(_state(noisier), {}, counts)[task] < base[task]


class TestOutlierDamping:
    """A single loss spike moves the window statistic by at most 2·|spike − mean| / n."""

    SPIKE = 10.0

    def _windows(self, capacity, rng):
        a = LossWindow("a", capacity)
        b = LossWindow("b", capacity)
        for v in rng.uniform(0.9, 1.1, size=capacity - 1):
            a.push(v)
        for v in rng.uniform(1.0, 3.0, size=capacity):
            b.push(v)
        return a, b

    def test_deviation_shift_is_bounded(self, rng):
        shifts = []
        for capacity in (10, 50, 400):
            a, _ = self._windows(capacity, rng)
            before, mean = avg_deviation(a), a.mean()
            a.push(self.SPIKE)
            shift = avg_deviation(a) - before
            assert shift <= 2.0 * abs(self.SPIKE - mean) / capacity + 1e-12
            shifts.append(shift)
        assert shifts[0] > shifts[1] > shifts[2]

    def test_long_window_keeps_weight_of_spiking_task(self, rng):
        betas = {}
        for capacity in (10, 400):
            state = WeightingState.create(["a", "b"], capacity=capacity)
            state.windows["a"], state.windows["b"] = self._windows(capacity, rng)
            push_loss(state, "a", self.SPIKE)
            betas[capacity] = compute_betas(state, {}, COUNTS)["a"]
        assert betas[400] > 1.5 * betas[10]


def avg_deviation_of(values) -> float:
    return float(np.mean(np.abs(values - values.mean())))


class TestWeightedLoss:

    def test_gradient_is_beta(self):
        losses = [Tensor(1.5, requires_grad=True), Tensor(0.5, requires_grad=True)]
        with ComputationTape() as tape:
            total = weighted_total_loss([2.0, 3.0], losses)
            tape.backward(total)
        assert total.item() == pytest.approx(4.5)
        assert float(losses[0].grad) == 2.0
        assert float(losses[1].grad) == 3.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            weighted_total_loss([1.0], [Tensor(1.0), Tensor(2.0)])


class TestStateDict:

    def test_round_trip(self):
        state = _state({"a": [1.0, 3.0, 2.5], "b": [0.5]})
        state.betas = {"a": 1.25, "b": 0.75}
        meta, arrays = state_dict(state)
        other = WeightingState.create(["a", "b"])
        load_state_dict(other, meta, arrays)
        np.testing.assert_array_equal(other.windows["a"].values(), [1.0, 3.0, 2.5])
        np.testing.assert_array_equal(other.windows["b"].values(), [0.5])
        assert other.betas == {"a": 1.25, "b": 0.75}

    def test_rows_report_window_deviation(self):
        state = _state({"a": [1.0, 3.0], "b": [2.0]})
        rows = weighting_rows(state, epoch=4, current_losses={"a": 3.0, "b": 2.0})
        assert rows[0]["window_mad"] == pytest.approx(1.0)
        assert np.isnan(rows[1]["window_mad"])
        assert {r["epoch"] for r in rows} == {4}


def test_head_gradient_scales_with_its_weight(small_model, rng):
    from mtl_core.model import forward_task
    from mtl_core.tensor import loss_fn

    x = rng.standard_normal((6, 4))
    ys = [rng.standard_normal((6, 2)), rng.integers(0, 3, size=6), rng.standard_normal((6, 2))]
    name = small_model.heads[0].component.layers[0].weight_name

    def head_grad(beta0):
        with ComputationTape() as tape:
            weights = {n: Tensor(w.values, requires_grad=True) for n, w in small_model.parameters().items()
                       if n.endswith(".weight")}
            losses = [loss_fn(h.loss, forward_task(small_model, x, t, weights), ys[t])
                      for t, h in enumerate(small_model.heads)]
            tape.backward(weighted_total_loss([beta0, 1.0, 1.0], losses))
        return weights[name].grad

    one, two = head_grad(1.0), head_grad(2.0)
    np.testing.assert_allclose(two, 2.0 * one, rtol=1e-9)
