import math
import struct

import numpy as np
import pytest

from msetrep import autodiff as ad
from msetrep.autodiff import NumericalError, ParameterStore, Tape


def tape_grad(fn, params):
    """Gradients of ``fn(tracked params)`` via the tape."""
    tape = Tape()
    out = fn(tape.watch(params))
    return out.data, tape.backward(out)


def check_against_fd(fn, params, tol=1e-4):
    _, g = tape_grad(fn, params)
    fd = ad.finite_difference_gradient(lambda p: float(fn({k: ad.constant(v) for k, v in p.items()}).data), params)
    assert ad.gradient_relative_error(g, fd) <= tol


class TestPrimitives:
    def test_linear_example(self):
        out = ad.linear(ad.constant([[1.0, 0.0]]), ad.constant([[2.0, 0.0], [0.0, 3.0]]), ad.constant([1.0, 1.0]))
        assert out.data.tolist() == [[3.0, 1.0]]

    def test_linear_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        out = ad.linear(ad.constant(x), ad.constant(np.eye(3)), ad.constant(np.zeros(3)))
        assert np.array_equal(out.data, x)

    def test_linear_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.linear(ad.constant(np.ones((1, 2))), ad.constant(np.ones((3, 2))), ad.constant(np.ones(2)))

    def test_activations(self):
        assert math.isclose(float(ad.softplus(ad.constant(0.0)).data), math.log(2), rel_tol=1e-15)
        assert ad.relu(ad.constant([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
        assert ad.tanh_act(ad.constant([0.0])).data.tolist() == [0.0]

    def test_softplus_positive(self):
        z = np.random.default_rng(1).uniform(-30, 30, 10_000)
        assert np.all(ad.softplus(ad.constant(z)).data > 0)

    def test_softplus_large_inputs_finite(self):
        out = ad.softplus(ad.constant([-800.0, 800.0])).data
        assert np.all(np.isfinite(out)) and out[1] == 800.0

    def test_normalize_examples(self):
        half = ad.normalize_l1(ad.constant([[math.log(2), math.log(2)]])).data
        assert half.tolist() == [[0.5, 0.5]]
        row = np.array([[0.2, 0.3, 0.5]])
        assert np.allclose(ad.normalize_l1(ad.constant(row)).data, row, rtol=0, atol=1e-15)

    def test_normalize_rows_sum_to_one(self):
        x = np.random.default_rng(2).uniform(0, 5, (200, 7))
        y = ad.normalize_l1(ad.constant(x)).data
        assert np.all(np.abs(y.sum(axis=1) - 1) <= 1e-12) and np.all(y >= 0)

    def test_normalize_rejects_zero_rows(self):
        with pytest.raises(NumericalError):
            ad.normalize_l1(ad.constant([[0.0, 0.0]]))

    def test_pools(self):
        assert float(ad.l1_distance(ad.constant([1.0, 2.0]), ad.constant([0.0, 4.0])).data) == 3
        assert float(ad.min_pool_sum(ad.constant([3.0, 2.0, 0.0]), ad.constant([2.0, 1.0, 1.0])).data) == 3
        rows = ad.constant([[1.0, 0.0], [0.0, 2.0]])
        assert ad.sum_pool(rows).data.tolist() == [1.0, 2.0]
        assert ad.sum_pool(rows, np.array([2.0, 0.5])).data.tolist() == [2.0, 1.0]

    def test_pool_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.l1_distance(ad.constant([1.0, 2.0]), ad.constant([1.0]))


class TestSubgradients:
    def test_ties_route_nothing(self):
        params = {"u": np.array([1.0, 2.0]), "v": np.array([1.0, 0.5])}
        _, g = tape_grad(lambda P: ad.l1_distance(P["u"], P["v"]), params)
        assert g["u"].tolist() == [0.0, 1.0] and g["v"].tolist() == [0.0, -1.0]
        _, g = tape_grad(lambda P: ad.min_pool_sum(P["u"], P["v"]), params)
        assert g["u"].tolist() == [0.0, 0.0] and g["v"].tolist() == [0.0, 1.0]

    def test_relu_at_zero(self):
        _, g = tape_grad(lambda P: ad.total(ad.relu(P["x"])), {"x": np.array([0.0, 1.0, -1.0])})
        assert g["x"].tolist() == [0.0, 1.0, 0.0]

    def test_kink_distance_recorded(self):
        tape = Tape()
        P = tape.watch({"x": np.array([0.3, -0.002])})
        ad.relu(P["x"])
        assert tape.kink_distance == pytest.approx(0.002)


class TestGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(3)

    def test_linear_against_fd(self):
        params = {"x": self.rng.standard_normal((3, 4)), "W": self.rng.standard_normal((4, 2)), "b": self.rng.standard_normal(2)}
        check_against_fd(lambda P: ad.total(ad.tanh_act(ad.linear(P["x"], P["W"], P["b"]))), params)

    def test_simplex_chain_against_fd(self):
        params = {"x": self.rng.standard_normal((3, 4)), "w": self.rng.uniform(0.5, 2, 3)}

        def fn(P):
            rows = ad.normalize_l1(ad.softplus(P["x"]))
            return ad.squared_error(ad.min_pool_sum(ad.sum_pool(rows, [1.0, 2.0, 0.0]), ad.sum_pool(rows, [0.0, 1.0, 3.0])), 2.0)

        check_against_fd(fn, {"x": params["x"]})

    def test_two_layer_net_against_fd(self):
        layers = {"W0": self.rng.standard_normal((4, 6)), "b0": self.rng.standard_normal(6) + 3,
                  "W1": self.rng.standard_normal((6, 3)), "b1": self.rng.standard_normal(3)}
        x = ad.constant(self.rng.standard_normal((5, 4)))

        def fn(P):
            h = ad.mlp(x, [(P["W0"], P["b0"]), (P["W1"], P["b1"])], ad.relu)
            return ad.squared_error(ad.l1_distance(ad.sum_pool(h, [1, 1, 0, 0, 0]), ad.sum_pool(h, [0, 0, 1, 1, 1])), 1.0)

        check_against_fd(fn, layers)

    def test_fd_quadratic(self):
        g = ad.finite_difference_gradient(lambda p: float(p["p"] ** 2), {"p": np.array(3.0)})
        assert abs(float(g["p"]) - 6.0) <= 1e-6

    def test_fd_constant(self):
        g = ad.finite_difference_gradient(lambda p: 4.0, {"p": np.ones(3)})
        assert np.array_equal(g["p"], np.zeros(3))

    def test_relative_error_ignores_scale(self):
        a = {"w": np.array([1.0, 2.0]), "b": np.array([0.0])}
        b = {"w": np.array([1.0, 2.0]), "b": np.array([1e-12])}
        assert ad.gradient_relative_error(a, b) < 1e-11
        assert ad.gradient_relative_error({"w": np.zeros(2)}, {"w": np.zeros(2)}) == 0.0


def adam_reference(g_seq, lr=5e-5, b1=0.9, b2=0.999, eps=1e-8, p=0.0):
    """Scalar Adam written out from its recurrence."""
    m = v = 0.0
    out = []
    for t, g in enumerate(g_seq, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


class TestAdam:
    def store(self, value=0.0, **kw):
        return ParameterStore.from_arrays({"p": np.array([value])}, **kw)

    def test_first_step_is_lr_times_sign(self):
        s = ad.adam_step(self.store(), {"p": np.array([-0.37])})
        assert s.step == 1
        assert abs(float(s.params["p"][0]) - 5e-5) <= 5e-5 * 1e-6

    def test_matches_reference_recurrence(self):
        gs = [0.3, -1.2, 0.05, 2.0, 2.0]
        s = self.store(1.5)
        for g in gs:
            s = ad.adam_step(s, {"p": np.array([g])})
        assert float(s.params["p"][0]) == pytest.approx(adam_reference(gs, p=1.5)[-1], rel=0, abs=1e-15)

    def test_zero_gradient_keeps_parameters(self):
        s = ad.adam_step(self.store(2.0), {"p": np.zeros(1)})
        assert float(s.params["p"][0]) == 2.0

    def test_constant_gradient_moves_monotonically(self):
        s0 = self.store(0.0)
        s1 = ad.adam_step(s0, {"p": np.array([1.0])})
        s2 = ad.adam_step(s1, {"p": np.array([1.0])})
        assert s0.params["p"][0] > s1.params["p"][0] > s2.params["p"][0]

    def test_deterministic(self):
        s = self.store(0.3)
        g = {"p": np.array([0.123])}
        assert np.array_equal(ad.adam_step(s, g).flat, ad.adam_step(s, g).flat)

    def test_rejects_non_finite(self):
        with pytest.raises(NumericalError, match="p"):
            ad.adam_step(self.store(), {"p": np.array([np.inf])})

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            ad.adam_step(self.store(), {"p": np.zeros(2)})

    def test_store_is_immutable(self):
        s = self.store()
        with pytest.raises(ValueError):
            s.params["p"][0] = 1.0


class TestCheckpointFormat:
    def test_layout_bytes(self, tmp_path):
        path = tmp_path / "t.bin"
        ad.write_tensors(path, {"w": np.array([[1.0, 2.0, 3.0]])})
        raw = path.read_bytes()
        assert raw[:4] == b"MSLB"
        assert struct.unpack_from("<II", raw, 4) == (1, 1)
        assert struct.unpack_from("<I", raw, 12) == (1,)
        assert raw[16:17] == b"w"
        assert struct.unpack_from("<I", raw, 17) == (2,)
        assert struct.unpack_from("<2Q", raw, 21) == (1, 3)
        assert struct.unpack_from("<3d", raw, 37) == (1.0, 2.0, 3.0)
        assert len(raw) == 61

    def test_store_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        s = ParameterStore.from_arrays({"a.W": rng.standard_normal((3, 2)), "a.b": rng.standard_normal(2)})
        s = ad.adam_step(s, {"a.W": rng.standard_normal((3, 2)), "a.b": rng.standard_normal(2)})
        ad.save_store(s, tmp_path / "s.bin")
        back = ad.load_store(tmp_path / "s.bin")
        assert back.step == 1
        assert np.array_equal(back.flat, s.flat)
        assert np.array_equal(back.m_flat, s.m_flat) and np.array_equal(back.v_flat, s.v_flat)

    def test_truncated_file_names_offset(self, tmp_path):
        path = tmp_path / "t.bin"
        ad.write_tensors(path, {"w": np.ones(4)})
        path.write_bytes(path.read_bytes()[:30])
        with pytest.raises(ValueError, match="offset"):
            ad.read_tensors(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.bin"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError, match="magic"):
            ad.read_tensors(path)
