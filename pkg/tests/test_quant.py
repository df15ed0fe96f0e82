import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afq.quant import (
    PER_CHANNEL,
    PER_GROUP,
    PER_TENSOR,
    QuantConfig,
    compute_qparams,
    fake_quant,
    quantize_export,
    round_away,
)


def test_round_away_from_zero():
    x = np.array([0.5, 1.5, 2.5, -0.5, -1.5, -2.5, 3.49, -3.49])
    assert np.array_equal(round_away(x), [1, 2, 3, -1, -2, -3, 3, -3])


class TestComputeQparams:
    def test_zero_to_three_two_bits(self):
        # delta = (3-0)/(2^2-1) = 1, zp = 0
        qp = compute_qparams(np.array([0.0, 1.0, 2.0, 3.0]), QuantConfig(2, PER_TENSOR))
        assert qp.delta.ravel()[0] == 1.0
        assert qp.zero_point.ravel()[0] == 0.0

    def test_degenerate_floor(self):
        qp = compute_qparams(np.zeros(8), QuantConfig(4, PER_TENSOR))
        assert qp.delta.ravel()[0] == 1e-8
        assert qp.zero_point.ravel()[0] == 0.0

    def test_symmetric_range_three_bits(self):
        # delta = 2/7, zp = round(-(-1)/(2/7)) = round(3.5) -> 4 (half away)
        qp = compute_qparams(np.array([-1.0, 1.0]), QuantConfig(3, PER_TENSOR))
        assert np.isclose(qp.delta.ravel()[0], 2 / 7)
        assert qp.zero_point.ravel()[0] == 4.0

    def test_per_channel_shapes(self):
        x = np.random.default_rng(0).standard_normal((6, 4))
        qp = compute_qparams(x, QuantConfig(4, PER_CHANNEL))
        assert qp.delta.shape == (4, 1)

    def test_per_group_shapes(self):
        x = np.random.default_rng(0).standard_normal((6, 4))
        qp = compute_qparams(x, QuantConfig(4, PER_GROUP, group_size=3))
        assert qp.delta.shape == (8, 1)  # (6/3) * 4 groups

    def test_group_size_must_divide(self):
        x = np.ones((6, 4))
        with pytest.raises(ValueError, match="divide"):
            compute_qparams(x, QuantConfig(4, PER_GROUP, group_size=4))

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            compute_qparams(np.zeros((0,)), QuantConfig(4, PER_TENSOR))


class TestFakeQuant:
    def test_grid_fixed_point(self):
        x = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
        qp = compute_qparams(x, QuantConfig(4, PER_TENSOR))
        y = fake_quant(x, qp)
        assert np.array_equal(fake_quant(y, qp), y)

    def test_hand_case_negative(self):
        # round(-0.6/0.5) = round(-1.2) = -1; -1+2 = 1 in range; (1-2)*0.5
        qp = compute_qparams(np.array([-1.0, 0.5]), QuantConfig(3, PER_TENSOR))
        qp.delta[:] = 0.5
        qp.zero_point[:] = 2.0
        out = fake_quant(np.array([-0.6]), qp)
        assert out[0] == -0.5

    def test_clamp_high(self):
        qp = compute_qparams(np.array([0.0, 15.0]), QuantConfig(4, PER_TENSOR))
        assert qp.delta.ravel()[0] == 1.0 and qp.zero_point.ravel()[0] == 0.0
        assert fake_quant(np.array([100.0]), qp)[0] == 15.0

    def test_shape_mismatch(self):
        qp = compute_qparams(np.ones((4, 4)), QuantConfig(4, PER_CHANNEL))
        with pytest.raises(ValueError, match="shape"):
            fake_quant(np.ones((4, 5)), qp)


class TestExport:
    def test_zeros_zero_codes(self):
        x = np.zeros((3, 3))
        qp = compute_qparams(x, QuantConfig(4, PER_TENSOR))
        qt = quantize_export(x, qp)
        assert np.all(qt.codes == 0)

    def test_roundtrip_matches_fake_quant(self):
        x = np.random.default_rng(5).standard_normal((8, 6))
        for gran, g in ((PER_TENSOR, None), (PER_CHANNEL, None), (PER_GROUP, 4)):
            cfg = QuantConfig(4, gran, group_size=g)
            qp = compute_qparams(x, cfg)
            qt = quantize_export(x, qp)
            assert np.array_equal(qt.dequantize(), fake_quant(x, qp))
            assert qt.codes.dtype == np.uint8
            assert qt.codes.max() <= 15

    def test_u16_for_wide_bits(self):
        x = np.random.default_rng(5).standard_normal(64)
        cfg = QuantConfig(12, PER_TENSOR)
        qt = quantize_export(x, compute_qparams(x, cfg))
        assert qt.codes.dtype == np.uint16


@st.composite
def tensor_and_cfg(draw):
    bits = draw(st.sampled_from([2, 3, 4, 8]))
    gran = draw(st.sampled_from([PER_TENSOR, PER_CHANNEL, PER_GROUP]))
    rows = draw(st.sampled_from([4, 8]))
    cols = draw(st.integers(1, 6))
    seed = draw(st.integers(0, 2**31))
    scale = draw(st.floats(0.01, 100.0))
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * scale
    cfg = QuantConfig(bits, gran, group_size=2 if gran == PER_GROUP else None)
    return x, cfg


class TestProperties:
    @given(tensor_and_cfg())
    @settings(max_examples=150, deadline=None)
    def test_idempotent(self, xc):
        x, cfg = xc
        qp = compute_qparams(x, cfg)
        y = fake_quant(x, qp)
        assert np.array_equal(fake_quant(y, qp), y)

    @given(tensor_and_cfg())
    @settings(max_examples=150, deadline=None)
    def test_grid_membership(self, xc):
        x, cfg = xc
        qp = compute_qparams(x, cfg)
        y = fake_quant(x, qp)
        qt = quantize_export(x, qp)
        assert qt.codes.min() >= 0 and qt.codes.max() <= cfg.qmax
        assert np.array_equal(qt.dequantize(), y)

    @given(tensor_and_cfg())
    @settings(max_examples=150, deadline=None)
    def test_bounded_error_in_range(self, xc):
        x, cfg = xc
        qp = compute_qparams(x, cfg)
        y = fake_quant(x, qp)
        from afq.checks import is_clipped, ungrouped_delta

        half = ungrouped_delta(qp, x.shape) / 2
        ok = np.abs(y - x) <= half * (1 + 1e-9) + 1e-12
        assert np.all(ok | is_clipped(x, qp))

    def test_group_permutation_commutes(self):
        # permuting output channels permutes per-channel outputs
        x = np.random.default_rng(9).standard_normal((8, 5))
        cfg = QuantConfig(4, PER_CHANNEL)
        perm = np.random.default_rng(1).permutation(5)
        direct = fake_quant(x[:, perm], compute_qparams(x[:, perm], cfg))
        permuted = fake_quant(x, compute_qparams(x, cfg))[:, perm]
        assert np.array_equal(direct, permuted)

    def test_group_blocks_independent(self):
        # per-group: swapping two input-dim blocks swaps outputs
        x = np.random.default_rng(9).standard_normal((8, 3))
        cfg = QuantConfig(4, PER_GROUP, group_size=4)
        swapped = np.concatenate([x[4:], x[:4]])
        direct = fake_quant(swapped, compute_qparams(swapped, cfg))
        moved = fake_quant(x, compute_qparams(x, cfg))
        assert np.array_equal(direct, np.concatenate([moved[4:], moved[:4]]))
