import dataclasses
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npe_sim import nonlinear as nl
from npe_sim import vecops as vo
from npe_sim.fixedpoint import dequantize_array, fmt, quantize_array

from oracles import sat

CFG = nl.DEFAULT_CONFIG
SM_ULP = CFG.softmax_out.ulp

# frozen from mpmath runs (30 digits) before the suite was written
GELU1_ORACLE = 0.8413447460685429
SOFTMAX512_THRESHOLD = 1.5e-3  # oracle worst case 9.55e-4
LAYERNORM768_THRESHOLD = 5e-3  # oracle worst case 3.14e-3


def _sm_raw(xs):
    return quantize_array(np.asarray(xs, dtype=np.float64), CFG.softmax_in)


class TestSoftmax:
    @pytest.mark.parametrize("n", [1, 2, 4, 64, 512])
    def test_constant_power_of_two(self, n):
        out = nl.softmax_fixed(np.full(n, 300))
        assert out.tolist() == [min(CFG.softmax_out.max_raw, (1 << 15) // n)] * n

    @pytest.mark.parametrize("n", [3, 7, 100, 768])
    def test_constant_any_length(self, n):
        y = nl.softmax_row(np.full(n, -2.5), "fixed_point")
        assert np.all(np.abs(y - 1.0 / n) <= SM_ULP)

    def test_reference_constant(self):
        assert np.allclose(nl.softmax_row(np.zeros(5)), 0.2)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=96))
    def test_sum_within_n_ulps(self, xs):
        out = nl.softmax_fixed(_sm_raw(xs))
        assert np.all(out >= 0)
        assert abs(int(out.sum()) - (1 << 15)) <= len(xs)

    @pytest.mark.parametrize("n", [2, 3, 5, 128, 512])
    def test_sum_random_rows(self, n):
        rng = np.random.default_rng(n)
        for _ in range(200):
            out = nl.softmax_fixed(_sm_raw(rng.standard_normal(n) * rng.uniform(0.1, 8)))
            assert abs(int(out.sum()) - (1 << 15)) <= n

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(-4000, 4000), min_size=1, max_size=64), st.integers(-28000, 28000))
    def test_shift_invariance_bit_exact(self, xs, c):
        x = np.array(xs, dtype=np.int64)
        assert np.array_equal(nl.softmax_fixed(x + c), nl.softmax_fixed(x))

    def test_512_random_rows_vs_reference(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(30):
            x = dequantize_array(_sm_raw(rng.standard_normal(512)), CFG.softmax_in)
            worst = max(worst, np.max(np.abs(nl.softmax_row(x, "fixed_point") - nl.softmax_row(x))))
        assert worst < SOFTMAX512_THRESHOLD

    def test_far_below_max_underflows_to_zero(self):
        y = nl.softmax_row(np.array([0.0, -30.0]), "fixed_point")
        assert y[1] == 0.0 and abs(y[0] - 1) <= SM_ULP

    def test_empty(self):
        with pytest.raises(ValueError):
            nl.softmax_row(np.array([]), "fixed_point")
        with pytest.raises(ValueError):
            nl.softmax_fixed(np.array([], dtype=np.int64))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            nl.softmax_row(np.ones(3), "float")


class TestLayerNorm:
    @pytest.mark.parametrize("value", [0.0, 3.25, -17.5])
    def test_constant_row_returns_beta_exactly(self, value):
        rng = np.random.default_rng(1)
        gamma = quantize_array(rng.normal(1, 0.3, 64), CFG.ln_gamma)
        beta = quantize_array(rng.normal(0, 0.5, 64), CFG.ln_out)
        x = quantize_array(np.full(64, value), CFG.ln_in)
        assert np.array_equal(nl.layernorm_fixed(x, gamma, beta), beta)

    def test_constant_row_real_wrapper(self):
        p = nl.LayerNormParams(np.full(8, 2.0), np.linspace(-1, 1, 8))
        assert np.allclose(nl.layernorm_row(np.full(8, 4.0), p, "fixed_point"), np.linspace(-1, 1, 8),
                           atol=CFG.ln_out.ulp / 2)
        assert np.allclose(nl.layernorm_row(np.full(8, 4.0), p), np.linspace(-1, 1, 8))

    def test_unit_pair(self):
        p = nl.LayerNormParams.identity(2, epsilon=2.0 ** -30)
        assert nl.layernorm_row(np.array([1.0, -1.0]), p, "fixed_point").tolist() == [1.0, -1.0]
        assert np.allclose(nl.layernorm_row(np.array([1.0, -1.0]), p), [1.0, -1.0])

    def test_768_random_rows_vs_reference(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(20):
            x = rng.standard_normal(768) * rng.uniform(0.2, 4) + rng.uniform(-3, 3)
            x = dequantize_array(quantize_array(x, CFG.ln_in), CFG.ln_in)
            p = nl.LayerNormParams(1 + 0.1 * rng.standard_normal(768), 0.1 * rng.standard_normal(768))
            p = nl.LayerNormParams(dequantize_array(quantize_array(p.gamma, CFG.ln_gamma), CFG.ln_gamma),
                                   dequantize_array(quantize_array(p.beta, CFG.ln_out), CFG.ln_out))
            worst = max(worst, np.max(np.abs(nl.layernorm_row(x, p, "fixed_point") - nl.layernorm_row(x, p))))
        assert worst < LAYERNORM768_THRESHOLD

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=64))
    def test_reference_standardizes(self, xs):
        x = np.array(xs)
        if np.var(x) < 1.0:  # keep epsilon negligible next to the variance
            return
        y = nl.layernorm_row(x, nl.LayerNormParams.identity(len(xs)))
        assert abs(y.mean()) < 1e-9
        assert abs(y.var() - 1) < 1e-5

    def test_residual_fused_matches_explicit_add(self):
        rng = np.random.default_rng(3)
        x = quantize_array(rng.normal(0, 2, 96), CFG.ln_in)
        r = quantize_array(rng.normal(0, 2, 96), CFG.ln_in)
        g = quantize_array(np.ones(96), CFG.ln_gamma)
        b = quantize_array(np.zeros(96), CFG.ln_out)
        summed = np.array([sat(int(a) + int(c), 16) for a, c in zip(x, r)])
        assert np.array_equal(nl.layernorm_fixed(x, g, b, residual_raw=r), nl.layernorm_fixed(summed, g, b))

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            nl.layernorm_row(np.ones(4), nl.LayerNormParams.identity(5), "fixed_point")
        with pytest.raises(ValueError):
            nl.layernorm_fixed(np.ones(4, dtype=np.int64), np.ones(4), np.ones(3))

    def test_params_validation(self):
        with pytest.raises(ValueError):
            nl.LayerNormParams(np.ones(3), np.ones(4))
        with pytest.raises(ValueError):
            nl.LayerNormParams(np.ones(3), np.ones(3), epsilon=0.0)


class TestGelu:
    def test_zero(self):
        assert nl.gelu(np.array([0.0]), "fixed_point")[0] == 0.0
        assert nl.gelu(np.array([0.0]))[0] == 0.0

    @pytest.mark.parametrize("x, want", [(10.0, 10.0), (15.5, 15.5), (-10.0, 0.0), (-15.5, 0.0)])
    def test_asymptotes(self, x, want):
        assert abs(nl.gelu(np.array([x]), "fixed_point")[0] - want) <= CFG.gelu_io.ulp

    def test_one_matches_erf_oracle(self):
        assert abs(nl.gelu(np.array([1.0]))[0] - GELU1_ORACLE) < 1e-15
        assert abs(nl.gelu(np.array([1.0]), "fixed_point")[0] - GELU1_ORACLE) <= CFG.gelu_io.ulp

    def test_unimodal_exhaustive(self):
        # GELU dips to about -0.17 near x = -0.75, so the faithful table is
        # non-increasing up to its minimum and non-decreasing after it
        x = np.arange(CFG.gelu_io.min_raw, CFG.gelu_io.max_raw + 1)
        y = nl.gelu_fixed(x)
        m = int(np.argmin(y))
        assert np.all(np.diff(y[: m + 1]) <= 0) and np.all(np.diff(y[m:]) >= 0)
        assert -0.9 < x[m] * CFG.gelu_io.ulp < -0.5

    def test_tanh_form_agrees(self):
        x = np.linspace(-6, 6, 1001)
        assert np.max(np.abs(nl.gelu_tanh(x) - nl.gelu_exact(x))) < 1e-3

    def test_small_budget_still_builds(self):
        cfg = dataclasses.replace(CFG, budgets=nl.TableBudgets(2, 2, 2, 2))
        assert nl.build_tables(cfg).gelu.segments == 2


class TestAttentionScale:
    F = fmt("Q6.10@16")

    def test_identity(self):
        x = np.linspace(-30, 30, 97)
        assert np.array_equal(nl.apply_attention_scale(x, nl.AttentionScale(1.0), "fixed_point"),
                              dequantize_array(quantize_array(x, self.F), self.F))

    def test_all_eights(self):
        y = nl.apply_attention_scale(np.full((4, 5), 8.0), nl.AttentionScale(8.0), "fixed_point")
        assert np.all(y == 1.0)

    @pytest.mark.parametrize("k", [8.0, 3.0, 11.3137])
    def test_random_within_one_ulp(self, k):
        raw = np.random.default_rng(9).integers(self.F.min_raw, self.F.max_raw + 1, (64, 64))
        got = nl.attention_scale_fixed(raw, nl.AttentionScale(k), self.F, self.F)
        exact = [[Fraction(int(v)) / Fraction(k) for v in row] for row in raw]
        err = max(abs(int(g) - e) for grow, erow in zip(got, exact) for g, e in zip(grow, erow))
        assert err <= 1

    def test_sqrt64_is_exact_shift(self):
        raw = np.arange(self.F.min_raw, self.F.max_raw + 1, 5)
        got = nl.attention_scale_fixed(raw, nl.AttentionScale(8.0), self.F, self.F)
        want = [int(round(Fraction(int(v), 8))) for v in raw]  # Python round is ties-to-even
        assert got.tolist() == want

    def test_reference_divides(self):
        assert np.allclose(nl.apply_attention_scale(np.array([[16.0, -4.0]]), nl.AttentionScale(8.0)),
                           [[2.0, -0.5]])

    @pytest.mark.parametrize("k", [0.0, -1.0, float("nan")])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            nl.AttentionScale(k)


class TestUnifiedOps:
    def test_fixed_kernels_use_only_allowed_primitives(self):
        rng = np.random.default_rng(0)
        with vo.record_ops() as ops:
            nl.softmax_row(rng.standard_normal(512), "fixed_point")
            nl.layernorm_row(rng.standard_normal(768), nl.LayerNormParams.identity(768), "fixed_point")
            nl.gelu(rng.standard_normal(3072), "fixed_point")
            nl.apply_attention_scale(rng.standard_normal((8, 8)), nl.AttentionScale(8.0), "fixed_point")
        assert set(ops) <= vo.ALLOWED_KINDS
        assert ops["pwl_eval"] >= 4

    def test_budgets_change_tables(self):
        small = dataclasses.replace(CFG, budgets=nl.TableBudgets(4, 4, 4, 8))
        t = nl.build_tables(small)
        assert (t.exp.segments, t.recip.segments, t.rsqrt.segments, t.gelu.segments) == (4, 4, 4, 8)
        d = nl.build_tables()
        assert (d.exp.segments, d.recip.segments, d.rsqrt.segments, d.gelu.segments) == (32, 64, 16, 16)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            dataclasses.replace(CFG, ln_eps=0.0)
        with pytest.raises(ValueError):
            dataclasses.replace(CFG, ln_in=fmt("Q8.24@32"))
