import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hiertag import gradcore as gc
from hiertag.errors import LengthMismatch, NonScalarRoot, ShapeMismatch
from hiertag.hierarchy import Hierarchy, LabelState

FD_TOL = 1e-6


def fd_check(fn, *arrays):
    """Max relative error of analytic vs central-difference grads of fn(*nodes)."""
    nodes = [gc.param(a) for a in arrays]
    fn(*nodes).backward()
    worst = 0.0
    for node in nodes:
        num = gc.numeric_grad(lambda: fn(*[gc.const(n.value) for n in nodes]).item(), node.value)
        worst = max(worst, gc.relative_error(node.grad, num))
    return worst


def weighted(x, rng):
    # random linear functional, so every output entry matters
    w = rng.normal(size=x.shape)
    return gc.sum_all(gc.mul(x, gc.const(w)))


class TestAffine:
    def test_identity(self):
        out = gc.affine(gc.const([[1.0], [2.0]]), gc.const(np.eye(2)), gc.const(np.zeros((2, 1))))
        np.testing.assert_array_equal(out.value, [[1.0], [2.0]])

    def test_zero_weight_gives_bias(self, rng):
        b = rng.normal(size=(3, 1))
        out = gc.affine(gc.const(rng.normal(size=(4, 1))), gc.const(np.zeros((3, 4))), gc.const(b))
        np.testing.assert_array_equal(out.value, b)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            gc.affine(gc.const(np.ones((3, 1))), gc.const(np.ones((2, 4))), gc.const(np.ones((2, 1))))

    def test_fd(self, rng):
        x, W, b = rng.normal(size=(3, 1)), rng.normal(size=(4, 3)), rng.normal(size=(4, 1))
        probe = rng.normal(size=(4, 1))
        err = fd_check(lambda x, W, b: gc.sum_all(gc.mul(gc.affine(x, W, b), gc.const(probe))), x, W, b)
        assert err < FD_TOL


class TestSigmoid:
    def test_zero(self):
        assert gc.sigmoid(gc.const([[0.0]])).item() == 0.5

    def test_symmetry_and_range(self, rng):
        x = rng.uniform(-700, 700, size=(200, 1))
        a, b = gc.sigmoid(gc.const(x)).value, gc.sigmoid(gc.const(-x)).value
        np.testing.assert_allclose(a, 1.0 - b, atol=1e-12)
        assert np.isfinite(a).all() and (a >= 0).all() and (a <= 1).all()

    def test_fd(self, rng):
        probe = rng.normal(size=(5, 1))
        err = fd_check(lambda x: gc.sum_all(gc.mul(gc.sigmoid(x), gc.const(probe))), rng.normal(size=(5, 1)))
        assert err < FD_TOL


class TestSoftmaxCols:
    def test_uniform(self):
        np.testing.assert_allclose(gc.softmax_cols(gc.const(np.zeros((3, 1)))).value, 1 / 3)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(4, 3))
        shifted = x + np.array([[5.0, -100.0, 0.25]])
        np.testing.assert_allclose(gc.softmax_cols(gc.const(x)).value,
                                   gc.softmax_cols(gc.const(shifted)).value, atol=1e-12)

    def test_fd(self, rng):
        probe = rng.normal(size=(5, 2))
        err = fd_check(lambda x: gc.sum_all(gc.mul(gc.softmax_cols(x), gc.const(probe))), rng.normal(size=(5, 2)))
        assert err < FD_TOL

    @settings(max_examples=200)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)))
    def test_columns_stochastic(self, x):
        y = gc.softmax_cols(gc.const(x)).value
        np.testing.assert_allclose(y.sum(axis=0), 1.0, atol=1e-9)
        assert (y >= 0).all() and (y <= 1).all()

    def test_open_interval_for_moderate_inputs(self, rng):
        y = gc.softmax_cols(gc.const(rng.uniform(-30, 30, size=(6, 4)))).value
        assert (y > 0).all() and (y < 1).all()


class TestGroupedPooling:
    p = np.array([[0.9], [0.1], [0.2], [0.4]])

    def test_max(self, small_h):
        np.testing.assert_array_equal(gc.grouped_max(gc.const(self.p), small_h).value, [[0.9], [0.4]])

    def test_avg(self, small_h):
        np.testing.assert_allclose(gc.grouped_avg(gc.const(self.p), small_h).value, [[0.4], [0.4]], atol=1e-15)

    def test_avg_of_constant(self, small_h):
        p = np.full((4, 2), 0.3)
        np.testing.assert_array_equal(gc.grouped_avg(gc.const(p), small_h).value, np.full((2, 2), 0.3))

    def test_tie_routes_to_lowest_index(self):
        h = Hierarchy.from_groups({"g": ["a", "b"]})
        p = gc.param([[0.5], [0.5]])
        out = gc.grouped_max(p, h)
        assert out.item() == 0.5
        gc.sum_all(out).backward()
        np.testing.assert_array_equal(p.grad, [[1.0], [0.0]])

    def test_length_mismatch(self, small_h):
        with pytest.raises(LengthMismatch):
            gc.grouped_max(gc.const(np.ones((3, 1))), small_h)
        with pytest.raises(LengthMismatch):
            gc.grouped_avg(gc.const(np.ones((5, 1))), small_h)

    def test_max_fd(self, check_h, rng):
        p = rng.uniform(size=(6, 3))
        probe = rng.normal(size=(2, 3))
        err = fd_check(lambda p: gc.sum_all(gc.mul(gc.grouped_max(p, check_h), gc.const(probe))), p)
        assert err < FD_TOL

    def test_avg_fd(self, check_h, rng):
        probe = rng.normal(size=(2, 3))
        err = fd_check(lambda p: gc.sum_all(gc.mul(gc.grouped_avg(p, check_h), gc.const(probe))),
                       rng.uniform(size=(6, 3)))
        assert err < FD_TOL

    @given(arrays(np.float64, (6, 2), elements=st.floats(0, 1)))
    def test_max_and_avg_bounds(self, p):
        h = Hierarchy.from_groups({"a": ["a1", "a2", "a3", "a4"], "b": ["b1", "b2"]})
        mx = gc.grouped_max(gc.const(p), h).value
        av = gc.grouped_avg(gc.const(p), h).value
        for c, idx in enumerate(h.group_index):
            sub = p[list(idx)]
            assert (mx[c] >= sub).all()
            assert (mx[c] == sub.max(axis=0)).all()
            assert (av[c] >= sub.min(axis=0)).all() and (av[c] <= sub.max(axis=0)).all()


class TestMatvecT:
    def test_one_hot_column(self):
        p = np.array([[0.9], [0.1], [0.2]])
        W = np.zeros((3, 2))
        W[1, 0] = W[2, 1] = 1.0
        np.testing.assert_array_equal(gc.matvec_T(gc.const(W), gc.const(p)).value, [[0.1], [0.2]])

    def test_uniform_column(self):
        p = np.array([[0.9], [0.1], [0.2]])
        out = gc.matvec_T(gc.const(np.full((3, 1), 1 / 3)), gc.const(p))
        assert out.item() == pytest.approx(0.4, abs=1e-15)

    def test_batched_matches_loop(self, rng):
        W, p = rng.normal(size=(5, 2, 3)), rng.normal(size=(5, 3))
        out = gc.matvec_T(gc.const(W), gc.const(p)).value
        for b in range(3):
            np.testing.assert_allclose(out[:, b], W[:, :, b].T @ p[:, b], atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            gc.matvec_T(gc.const(np.ones((3, 2))), gc.const(np.ones((4, 1))))

    @pytest.mark.parametrize("W_shape", [(5, 2), (5, 2, 3)])
    def test_fd(self, rng, W_shape):
        probe = rng.normal(size=(2, 3))
        err = fd_check(lambda W, p: gc.sum_all(gc.mul(gc.matvec_T(W, p), gc.const(probe))),
                       rng.normal(size=W_shape), rng.normal(size=(5, 3)))
        assert err < FD_TOL


class TestMaskedBCE:
    def test_half_positive(self):
        loss = gc.masked_bce(gc.const([[0.5]]), [[LabelState.POSITIVE]])
        assert loss.item() == pytest.approx(np.log(2), abs=1e-15)

    def test_all_unobserved(self):
        p = gc.param([[0.3], [0.8]])
        loss = gc.masked_bce(p, np.full((2, 1), LabelState.UNOBSERVED))
        assert loss.item() == 0.0
        loss.backward()
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_unobserved_labels_ignored_bitwise(self, rng):
        pv = rng.uniform(size=(6, 4))
        labels = rng.integers(0, 2, size=(6, 4))
        mask = rng.random((6, 4)) < 0.6
        flipped = np.where(mask, labels, 1 - labels)
        results = []
        for lab in (labels, flipped):
            p = gc.param(pv.copy())
            loss = gc.bce_with_mask(p, lab, mask)
            loss.backward()
            results.append((loss.value.tobytes(), p.grad.tobytes()))
        assert results[0] == results[1]

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            gc.masked_bce(gc.const(np.ones((3, 1)) / 2), np.ones((2, 1)))

    def test_fd(self, rng):
        states = rng.integers(-1, 2, size=(5, 3))
        err = fd_check(lambda p: gc.masked_bce(p, states), rng.uniform(0.05, 0.95, size=(5, 3)))
        assert err < FD_TOL

    @given(arrays(np.float64, (4, 2), elements=st.floats(0, 1)),
           arrays(np.int8, (4, 2), elements=st.sampled_from([-1, 0, 1])))
    def test_nonnegative(self, p, states):
        assert gc.masked_bce(gc.const(p), states).item() >= 0.0

    def test_zero_only_at_clamped_ideal(self):
        states = np.array([[1], [0], [-1]])
        ideal = gc.masked_bce(gc.const([[1.0], [0.0], [0.7]]), states).item()
        assert ideal == pytest.approx(-np.log1p(-1e-7), rel=1e-9)  # floor set by the clamp
        assert gc.masked_bce(gc.const([[0.9], [0.0], [0.7]]), states).item() > ideal


class TestEngine:
    def test_backward_accumulates(self, rng):
        x = gc.param(rng.normal(size=(3, 1)))
        root = gc.sum_all(gc.sigmoid(x))
        root.backward()
        once = x.grad.copy()
        root.backward()
        np.testing.assert_allclose(x.grad, 2 * once, rtol=0, atol=0)
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_non_scalar_root(self):
        with pytest.raises(NonScalarRoot):
            gc.sigmoid(gc.param(np.zeros((2, 1)))).backward()

    def test_shared_subgraph(self, rng):
        # x used twice: d/dx sum(s * s) = 2 s s'
        x = gc.param(rng.normal(size=(4, 1)))
        s = gc.sigmoid(x)
        gc.sum_all(gc.mul(s, s)).backward()
        sv = s.value
        np.testing.assert_allclose(x.grad, 2 * sv * sv * (1 - sv), rtol=1e-14)

    def test_weighted_sum(self):
        a, b = gc.param([[1.0]]), gc.param([[0.5]])
        out = gc.weighted_sum([a, b], [0.8, 0.2])
        assert out.item() == pytest.approx(0.9)
        out.backward()
        assert (a.grad.item(), b.grad.item()) == (0.8, pytest.approx(0.2))


class TestCheckGradients:
    def test_sum_of_inputs(self, rng):
        def build(rng):
            inputs = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(1, 1))}
            return inputs, lambda n: gc.weighted_sum([gc.sum_all(n["a"]), gc.sum_all(n["b"])], [1, 1])

        rep = gc.check_gradients(build, trials=3)
        assert rep.max_rel_error < 1e-8 and rep.trials == 3

    def test_bce_sigmoid_affine(self):
        def build(rng):
            states = rng.integers(-1, 2, size=(4, 3))
            states[0, 0] = 1
            inputs = {"x": rng.normal(size=(5, 3)), "W": rng.normal(size=(4, 5)), "b": rng.normal(size=(4, 1))}
            return inputs, lambda n: gc.masked_bce(gc.sigmoid(gc.affine(n["x"], n["W"], n["b"])), states)

        assert gc.check_gradients(build, trials=5, seed=3).max_rel_error < 1e-4

    def test_tie_is_skipped(self, small_h):
        def build(rng):
            return {"p": np.array([[0.5], [0.5], [0.1], [0.3]])}, lambda n: gc.sum_all(gc.grouped_max(n["p"], small_h))

        rep = gc.check_gradients(build, trials=2)
        assert rep.skipped == 2 and rep.trials == 0

    def test_non_scalar_root(self):
        def build(rng):
            return {"x": np.zeros((2, 1))}, lambda n: gc.sigmoid(n["x"])

        with pytest.raises(NonScalarRoot):
            gc.check_gradients(build)

    def test_detects_a_wrong_rule(self):
        def bad_square(x):
            v = x.value
            return gc.Node(v * v, (x,), lambda g: (g * v,))  # missing factor 2

        def build(rng):
            return {"x": rng.normal(size=(3, 1))}, lambda n: gc.sum_all(bad_square(n["x"]))

        assert gc.check_gradients(build).max_rel_error > 0.4


class TestUnitGuard:
    def test_clips_and_passes_gradient(self):
        x = gc.param(np.array([[1.0 + 2.2e-16, 0.3, -1e-300]]))
        y = gc.unit_guard(x)
        np.testing.assert_array_equal(y.value, [[1.0, 0.3, 0.0]])
        gc.sum_all(y).backward()
        np.testing.assert_array_equal(x.grad, np.ones((1, 3)))
