import numpy as np
import pytest

from afq.checks import nudge_off_boundaries
from afq.linalg import PrecisionScheme, random_sdd_matrix
from afq.quant import PER_CHANNEL, PER_TENSOR, QuantConfig, compute_qparams, sigmoid
from afq.tape import Graph, check_gradient, fake_quant_boundary_distance


class TestForward:
    def test_zero_norm(self):
        g = Graph()
        g.fro_norm_sq(g.leaf("x"))
        assert g.forward({"x": np.zeros((3, 3))}) == 0.0

    def test_identity_cancellation(self):
        g = Graph()
        x = g.leaf("x")
        g.sub(g.matmul(x, g.const(np.eye(4))), x)
        out = g.forward({"x": np.random.default_rng(0).standard_normal((3, 4))})
        assert np.array_equal(out, np.zeros((3, 4)))

    def test_hand_norm(self):
        # (1*1 + 1*1)^2 = 4
        g = Graph()
        g.fro_norm_sq(g.matmul(g.leaf("x"), g.const([[1.0], [1.0]])))
        assert g.forward({"x": np.array([[1.0, 1.0]])}) == 4.0

    def test_unbound_leaf(self):
        g = Graph()
        g.fro_norm_sq(g.leaf("x"))
        with pytest.raises(KeyError, match="unbound leaf"):
            g.forward({})

    def test_shape_mismatch_at_node(self):
        g = Graph()
        g.matmul(g.leaf("x"), g.const(np.eye(3)))
        with pytest.raises(ValueError, match="matmul shape"):
            g.forward({"x": np.ones((2, 2))})

    def test_empty_graph(self):
        with pytest.raises(ValueError, match="empty"):
            Graph().forward({})


class TestBackward:
    def test_quadratic_form(self):
        g = Graph()
        g.fro_norm_sq(g.leaf("a"))
        a = np.random.default_rng(1).standard_normal((3, 3))
        grads = g.gradients({"a": a})
        assert np.allclose(grads["a"], 2 * a)

    def test_inverse_scalar(self):
        # d(1/a)/da = -1/a^2 = -0.25 at a = 2
        g = Graph()
        g.sum_all(g.inverse(g.leaf("a")))
        grads = g.gradients({"a": np.array([[2.0]])})
        assert np.allclose(grads["a"], [[-0.25]])

    def test_ste_passthrough(self):
        # strictly inside clamp range, off rounding boundaries:
        # grad of ||fq(w)||^2 is 2*fq(w)
        w = np.random.default_rng(2).standard_normal((4, 4))
        qp = compute_qparams(w, QuantConfig(6, PER_TENSOR))
        w = nudge_off_boundaries(w, qp, 1e-4)
        g = Graph()
        y = g.fake_quant(g.leaf("w"), qp)
        g.fro_norm_sq(y)
        val = g.forward({"w": w})
        grads = g.backward()
        fq = g.nodes[y.idx].value
        assert np.allclose(grads["w"], 2 * fq)
        err = check_gradient(g, {"w": w}, "w", eps=1e-6)
        assert err < 1e-4
        assert val >= 0

    def test_non_scalar_root(self):
        g = Graph()
        g.matmul(g.leaf("x"), g.const(np.eye(2)))
        g.forward({"x": np.ones((2, 2))})
        with pytest.raises(ValueError, match="scalar"):
            g.backward()

    def test_backward_requires_forward(self):
        g = Graph()
        g.fro_norm_sq(g.leaf("x"))
        with pytest.raises(ValueError, match="forward"):
            g.backward()

    def test_determinism_bit_identical(self):
        g = Graph()
        x = g.leaf("x")
        a = g.leaf("a")
        y = g.matmul(g.matmul(x, g.inverse(a)), g.matmul(a, g.const(
            np.random.default_rng(3).standard_normal((5, 4)))))
        g.fro_norm_sq(g.layernorm(y, g.const(np.ones(4)), g.const(np.zeros(4))))
        bindings = {
            "x": np.random.default_rng(4).standard_normal((3, 5)),
            "a": random_sdd_matrix(np.random.default_rng(5), 5),
        }
        g1 = g.gradients(bindings)
        g2 = g.gradients(bindings)
        for k in g1:
            assert np.array_equal(g1[k], g2[k])


class TestCheckGradient:
    def test_quadratic_tight(self):
        g = Graph()
        g.fro_norm_sq(g.leaf("a"))
        a = np.random.default_rng(0).standard_normal((3, 3))
        assert check_gradient(g, {"a": a}, "a", eps=1e-5) < 1e-6

    def test_inverse_node(self):
        g = Graph()
        a = g.leaf("a")
        x = g.const(np.random.default_rng(1).standard_normal((3, 4)))
        g.fro_norm_sq(g.matmul(x, g.inverse(a)))
        bind = {"a": random_sdd_matrix(np.random.default_rng(2), 4)}
        assert check_gradient(g, bind, "a", eps=1e-5) < 1e-4

    def test_constant_graph_zero(self):
        g = Graph()
        g.sum_all(g.mul(g.leaf("x"), g.const(np.zeros((2, 2)))))
        err = check_gradient(g, {"x": np.ones((2, 2))}, "x", eps=1e-5)
        assert err == 0.0

    def test_inverse_composition_through_quant_shape(self):
        # gradient through X A^-1 Q(A W): the full expression, not just the
        # local inverse rule
        rng = np.random.default_rng(7)
        w0 = rng.standard_normal((4, 3))
        cfg = QuantConfig(8, PER_CHANNEL)
        g = Graph()
        a = g.leaf("a")
        x = g.const(rng.standard_normal((5, 4)))
        aw = g.matmul(a, g.const(w0))
        g.fro_norm_sq(g.matmul(g.matmul(x, g.inverse(a)), aw))
        bind = {"a": random_sdd_matrix(rng, 4)}
        assert check_gradient(g, bind, "a", eps=1e-5) < 1e-4

    def test_eps_validation(self):
        g = Graph()
        g.fro_norm_sq(g.leaf("x"))
        with pytest.raises(ValueError, match="eps"):
            check_gradient(g, {"x": np.ones((2, 2))}, "x", eps=0.0)


class TestSteRegions:
    def test_exact_region_gradients(self):
        # outside [0, 2^n-1] pre-clamp: exactly zero; inside: exactly upstream
        delta, zp, bits = 0.5, 4.0, 3
        qp = compute_qparams(np.array([-2.0, 1.5]), QuantConfig(bits, PER_TENSOR))
        qp.delta[:] = delta
        qp.zero_point[:] = zp
        x = np.array([-10.0, -0.6, 0.0, 1.4, 10.0])  # lo-clamp, in, in, in, hi-clamp
        g = Graph()
        g.sum_all(g.fake_quant(g.leaf("x"), qp))
        g.forward({"x": x})
        grads = g.backward()
        assert np.array_equal(grads["x"], [0.0, 1.0, 1.0, 1.0, 0.0])

    def test_boundary_distance_helper(self):
        qp = compute_qparams(np.array([0.0, 1.0]), QuantConfig(2, PER_TENSOR))
        x = np.array([0.5 / 3])  # exactly half a step
        assert fake_quant_boundary_distance(x * 3, qp) < 1e-12


class TestPrimitivesGradcheck:
    def test_layernorm(self):
        g = Graph()
        x = g.leaf("x")
        g.fro_norm_sq(
            g.layernorm(x, g.const(1.0 + 0.1 * np.arange(5)), g.const(np.zeros(5)))
        )
        bind = {"x": np.random.default_rng(0).standard_normal((4, 5))}
        assert check_gradient(g, bind, "x", eps=1e-5) < 1e-4

    def test_softmax_masked(self):
        g = Graph()
        x = g.leaf("x")
        mask = np.triu(np.full((4, 4), -1e30), k=1)
        g.fro_norm_sq(g.softmax(x, mask=mask))
        bind = {"x": np.random.default_rng(1).standard_normal((4, 4))}
        assert check_gradient(g, bind, "x", eps=1e-5) < 1e-4

    def test_gelu_relu(self):
        for act in ("relu", "gelu"):
            g = Graph()
            x = g.leaf("x")
            g.fro_norm_sq(getattr(g, act)(x))
            # keep entries away from the relu kink
            v = np.random.default_rng(2).standard_normal((3, 4))
            v[np.abs(v) < 0.05] = 0.1
            assert check_gradient(g, {"x": v}, "x", eps=1e-6) < 1e-4

    def test_slice_concat_transpose(self):
        g = Graph()
        x = g.leaf("x")
        parts = [g.slice_cols(x, 0, 2), g.slice_cols(x, 2, 4)]
        g.fro_norm_sq(g.transpose(g.concat_cols(parts[::-1])))
        bind = {"x": np.random.default_rng(3).standard_normal((3, 4))}
        assert check_gradient(g, bind, "x", eps=1e-5) < 1e-4

    def test_seg_split_merge(self):
        g = Graph()
        x = g.leaf("x")
        x3 = g.seg_split(x, 2)
        g.fro_norm_sq(g.seg_merge(g.matmul(x3, g.transpose(x3))))
        bind = {"x": np.random.default_rng(4).standard_normal((6, 3))}
        assert check_gradient(g, bind, "x", eps=1e-5) < 1e-4

    def test_row_broadcast_bias(self):
        g = Graph()
        b = g.leaf("b")
        x = g.const(np.random.default_rng(5).standard_normal((4, 3)))
        g.fro_norm_sq(g.add(x, b))
        assert check_gradient(g, {"b": np.ones((1, 3))}, "b", eps=1e-5) < 1e-4
        g2 = Graph()
        d = g2.leaf("d")
        g2.fro_norm_sq(g2.sub(g2.const(np.ones((4, 3))), d))
        assert check_gradient(g2, {"d": np.full(3, 0.3)}, "d", eps=1e-5) < 1e-4


class TestDynamicFakeQuant:
    def _setup(self, symmetric=False):
        rng = np.random.default_rng(11)
        w = rng.standard_normal((8, 3)) * 2.0
        cfg = QuantConfig(4, PER_CHANNEL, symmetric=symmetric, learnable_clip=True)
        g = Graph()
        lo = g.leaf("lo") if not symmetric else None
        hi = g.leaf("hi")
        args = dict(clip_hi=hi) if symmetric else dict(clip_lo=lo, clip_hi=hi)
        g.fro_norm_sq(g.fake_quant_dynamic(g.const(w), cfg, **args))
        bind = {"hi": rng.uniform(0.8, 1.6, size=3)}
        if not symmetric:
            bind["lo"] = rng.uniform(0.8, 1.6, size=3)
        return g, bind

    def test_clip_gradients_match_fd(self):
        g, bind = self._setup()
        for leaf in ("lo", "hi"):
            assert check_gradient(g, bind, leaf, eps=1e-6) < 5e-3

    def test_symmetric_clip_gradient(self):
        g, bind = self._setup(symmetric=True)
        assert check_gradient(g, bind, "hi", eps=1e-6) < 5e-3

    def test_matches_static_quantizer_forward(self):
        # fake_quant_dynamic with clips == compute_qparams + fake_quant
        from afq.quant import fake_quant

        rng = np.random.default_rng(12)
        w = rng.standard_normal((6, 4))
        raw = rng.uniform(0.5, 3.0, size=4)
        cfg = QuantConfig(4, PER_CHANNEL, learnable_clip=True)
        g = Graph()
        out = g.fake_quant_dynamic(g.leaf("w"), cfg, g.leaf("lo"), g.leaf("hi"))
        g.sum_all(out)
        g.forward({"w": w, "lo": raw, "hi": raw})
        expected = fake_quant(w, compute_qparams(w, cfg, sigmoid(raw), sigmoid(raw)))
        assert np.array_equal(g.nodes[out.idx].value, expected)

    def test_x_gradient_is_ste(self):
        rng = np.random.default_rng(13)
        w = rng.standard_normal((5, 2))
        cfg = QuantConfig(3, PER_CHANNEL)
        g = Graph()
        g.sum_all(g.fake_quant_dynamic(g.leaf("w"), cfg))
        g.forward({"w": w})
        grads = g.backward()
        assert set(np.unique(grads["w"])) <= {0.0, 1.0}


class TestSchemes:
    def test_float_scheme_stays_f32(self):
        g = Graph(PrecisionScheme.FLOAT)
        x = g.leaf("x")
        a = g.leaf("a")
        out = g.matmul(x, g.inverse(a), transform_side=True)
        g.fro_norm_sq(out)
        g.forward({
            "x": np.ones((2, 3), dtype=np.float32),
            "a": random_sdd_matrix(np.random.default_rng(0), 3).astype(np.float32),
        })
        assert g.nodes[out.idx].value.dtype == np.float32

    def test_float_double_promote_truncate(self):
        g = Graph(PrecisionScheme.FLOAT_DOUBLE)
        x = g.leaf("x")
        a = g.leaf("a")
        inv = g.inverse(a)
        out = g.matmul(x, inv, transform_side=True)
        g.fro_norm_sq(out)
        xv = np.random.default_rng(1).standard_normal((2, 3)).astype(np.float32)
        av = random_sdd_matrix(np.random.default_rng(2), 3)
        g.forward({"x": xv, "a": av})
        assert g.nodes[inv.idx].value.dtype == np.float64
        assert g.nodes[out.idx].value.dtype == np.float32
        exact = (xv.astype(np.float64) @ g.nodes[inv.idx].value).astype(np.float32)
        assert np.array_equal(g.nodes[out.idx].value, exact)
