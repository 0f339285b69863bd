import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npe_sim.fixedpoint import fmt, quantize_array
from npe_sim.mmu import (
    MmuConfig,
    MmuError,
    accumulate,
    default_tiling,
    mmu_matmul,
    shared_input_constraint_check,
)

from oracles import rne, sat

I16 = MmuConfig()
I8 = MmuConfig(precision="int8")


def big_int_matmul(a, b):
    a = [[int(v) for v in row] for row in a]
    b = [[int(v) for v in row] for row in b]
    return [[sum(x * y for x, y in zip(row, col)) for col in zip(*b)] for row in a]


class TestConfig:
    def test_mults_per_cycle(self):
        assert I16.mults_per_cycle == 2048
        assert I8.mults_per_cycle == 4096
        assert MmuConfig(pe_count=4, macs_per_pe=2, precision="int8").mults_per_cycle == 16

    @pytest.mark.parametrize("kw", [dict(precision="int4"), dict(pe_count=0), dict(output_fmt=fmt("Q8.24@32"))])
    def test_invalid(self, kw):
        with pytest.raises(MmuError):
            MmuConfig(**kw)


class TestNumerics:
    @pytest.mark.parametrize("cfg", [I8, I16])
    def test_identity(self, cfg):
        rng = np.random.default_rng(0)
        hi = 1 << (cfg.operand_bits - 1)
        x = rng.integers(-hi, hi, (12, 9))
        eye = np.eye(12, dtype=np.int64) << (cfg.operand_bits - 2)  # 1.0 with bits-2 fraction bits
        c, _ = mmu_matmul(eye, x, cfg, cfg.operand_bits - 2, 11)
        assert np.array_equal(c, x)

    def test_int8_64_cubed_vs_big_int(self):
        rng = np.random.default_rng(64)
        a = rng.integers(-128, 128, (64, 64))
        b = rng.integers(-128, 128, (64, 64))
        assert accumulate(a, b, I8).tolist() == big_int_matmul(a, b)

    def test_int16_extremes_exact(self):
        a = np.full((3, 3072), -(1 << 15))
        b = np.full((3072, 2), -(1 << 15))
        assert accumulate(a, b, I16).tolist() == big_int_matmul(a, b)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 40), st.integers(1, 6), st.integers(0, 2 ** 32 - 1),
           st.integers(14, 30))
    def test_requantize_oracle(self, n, k, m, seed, frac):
        rng = np.random.default_rng(seed)
        a = rng.integers(-(1 << 15), 1 << 15, (n, k))
        b = rng.integers(-(1 << 15), 1 << 15, (k, m))
        c, _ = mmu_matmul(a, b, I16, frac // 2, frac - frac // 2)
        want = [[sat(rne(sat(v, 32), frac - 11), 16) for v in row] for row in big_int_matmul(a, b)]
        assert c.tolist() == want

    def test_bias_initialises_accumulator(self):
        a = np.array([[1, 2]])
        b = np.array([[3], [4]])
        assert accumulate(a, b, I16, bias_acc=np.array([100])).tolist() == [[111]]

    def test_accumulator_saturates_once(self):
        a = np.full((1, 4), 1 << 15 - 1) * 0 + 32767
        b = np.full((4, 1), 32767)
        c, _ = mmu_matmul(a, b, I16, 0, 0, out_fmt=fmt("Q16.0@16"))
        assert c[0, 0] == 32767

    def test_tiling_order_irrelevant(self):
        rng = np.random.default_rng(5)
        a = rng.integers(-128, 128, (8, 30))
        b = rng.integers(-128, 128, (30, 5))
        perm = rng.permutation(30)
        assert np.array_equal(accumulate(a, b, I8), accumulate(a[:, perm], b[perm], I8))

    def test_error_bound_vs_real(self):
        rng = np.random.default_rng(11)
        fa, fb, fo = fmt("Q1.15@16"), fmt("Q1.15@16"), fmt("Q5.11@16")
        for k in (1, 16, 768):
            a = rng.uniform(-0.05, 0.05, (16, k))
            b = rng.uniform(-0.05, 0.05, (k, 16))
            aq, bq = quantize_array(a, fa), quantize_array(b, fb)
            c, _ = mmu_matmul(aq, bq, I16, 15, 15, out_fmt=fo)
            err = np.abs(c * fo.ulp - a @ b)
            # each product is off by at most |a| ulp_b / 2 + |b| ulp_a / 2 + ulp_a ulp_b / 4
            per = 0.05 * fb.ulp / 2 + 0.05 * fa.ulp / 2 + fa.ulp * fb.ulp / 4
            assert err.max() <= k * per + fo.ulp / 2

    def test_errors(self):
        with pytest.raises(MmuError):
            mmu_matmul(np.ones((2, 3)), np.ones((2, 3)), I16, 0, 0)
        with pytest.raises(MmuError):
            accumulate(np.full((1, 1), 200), np.ones((1, 1)), I8)
        with pytest.raises(MmuError):
            accumulate(np.ones(3), np.ones((3, 1)), I16)


class TestCycles:
    def test_single_pass(self):
        assert mmu_matmul(np.ones((1, 2048)), np.ones((2048, 1)), I16, 0, 0)[1] == 1

    @settings(max_examples=200)
    @given(st.integers(1, 600), st.integers(1, 600), st.integers(1, 4000))
    def test_formula_and_int8_half(self, n, m, k):
        from npe_sim.workload import matmul_cycles
        c16 = matmul_cycles(n, m, k, I16.mults_per_cycle)
        c8 = matmul_cycles(n, m, k, I8.mults_per_cycle)
        assert c16 == -(-(n * m * k) // 2048)
        assert c8 == -(-c16 // 2)
        if n * m * k % 4096 == 0:
            assert 2 * c8 == c16


class TestSharingAudit:
    def test_default_ok_random_shapes(self):
        rng = np.random.default_rng(100)
        for _ in range(100):
            n, k, m = (int(v) for v in rng.integers(1, 20, 3))
            assert shared_input_constraint_check(np.zeros((n, k)), np.zeros((k, m)), I8) is None

    def test_default_covers_every_product_once(self):
        for n, k, m in [(1, 1, 1), (3, 2, 5), (4, 3, 7), (2, 2, 2)]:
            t = default_tiling(n, m, k)
            prods = [tuple(p) for pair in t for p in pair if p[0] >= 0]
            assert sorted(prods) == sorted((i, j, l) for i in range(n) for j in range(k) for l in range(m))

    def test_adversarial_pairing(self):
        bad = [((0, 0, 0), (1, 1, 1)), ((0, 1, 0), (1, 0, 1)), ((0, 0, 1), (-1, -1, -1)),
               ((0, 1, 1), (-1, -1, -1)), ((1, 0, 0), (-1, -1, -1)), ((1, 1, 0), (-1, -1, -1))]
        v = shared_input_constraint_check(np.zeros((2, 2)), np.zeros((2, 2)), I8, bad)
        assert v is not None and v.tile == 0
        assert "no common operand" in str(v)

    def test_incomplete_tiling_rejected(self):
        with pytest.raises(MmuError):
            shared_input_constraint_check(np.zeros((1, 1)), np.zeros((1, 2)), I8, [((0, 0, 0), (0, 0, 0))])

    def test_int16_not_applicable(self):
        with pytest.raises(MmuError):
            shared_input_constraint_check(np.zeros((1, 1)), np.zeros((1, 1)), I16)
