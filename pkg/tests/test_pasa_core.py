import math

import numpy as np
import pytest
from conftest import relative_rmse

from pasa_lab.attention_ref import AttentionProblem, flash_attention, golden_attention
from pasa_lab.beta_solver import invariance_parameter
from pasa_lab.bench import nan_stats
from pasa_lab.pasa_core import (
    OnlineState,
    PasaParams,
    SingularShiftError,
    build_shifting_matrix,
    correction_terms,
    pasa_attention,
    pasa_block_update,
    preprocess_keys,
    recover_global_mean,
    shifting_coefficients,
    shifting_matrix_inverse,
)
from pasa_lab.tensors import ContractViolation, PolicyName, Precision, gemm, get_policy, rowmean

GOLDEN = get_policy(PolicyName.GOLDEN_FP64)
PASA = get_policy(PolicyName.PASA_FP16)
BETAS = [0.5, 0.9375, 0.984497]


class TestShiftingMatrix:
    def test_beta_zero_is_identity(self):
        m = build_shifting_matrix(4, 0.0, 1.0, Precision.FP64)
        assert np.array_equal(m.data, np.eye(4))

    def test_full_mean_removal(self):
        m = build_shifting_matrix(2, 1.0, 1.0, Precision.FP64)
        assert np.array_equal(m.data, [[0.5, -0.5], [-0.5, 0.5]])

    def test_fp16_entries_match_solver_parameters(self):
        beta = 0.984497
        diag, off = shifting_coefficients(128, beta, Precision.FP16)
        report = invariance_parameter(beta, 128)
        assert -off == report.b
        assert diag - off == report.a

        m = build_shifting_matrix(128, beta, math.sqrt(128), Precision.FP16)
        assert m.prec is Precision.FP16
        assert m.data[0, 0] == float(np.float16(diag / math.sqrt(128)))
        assert m.data[0, 1] == float(np.float16(off / math.sqrt(128)))
        assert len(np.unique(m.data)) == 2

    @pytest.mark.parametrize("beta", BETAS)
    def test_column_sums(self, beta):
        alpha = 8.0
        m = build_shifting_matrix(64, beta, alpha, Precision.FP64)
        np.testing.assert_allclose(m.data.sum(axis=0), (1 - beta) / alpha, rtol=1e-12)

    def test_invalid_arguments(self):
        with pytest.raises(ContractViolation):
            build_shifting_matrix(4, 1.5, 1.0, Precision.FP64)
        with pytest.raises(ContractViolation):
            build_shifting_matrix(4, 0.5, 0.0, Precision.FP64)
        with pytest.raises(ContractViolation):
            build_shifting_matrix(0, 0.5, 1.0, Precision.FP64)


class TestParams:
    def test_create(self):
        p = PasaParams.create(0.9375, 64, 128)
        assert p.alpha == 8.0
        assert p.invariance == 15.0
        assert p.M.rows == 128

    def test_beta_one_is_singular(self):
        with pytest.raises(SingularShiftError):
            PasaParams.create(1.0, 64, 128)

    def test_beta_out_of_range(self):
        with pytest.raises(ContractViolation):
            PasaParams.create(-0.1, 64, 128)


class TestInverse:
    def test_zero_lambda_is_identity(self):
        assert np.array_equal(shifting_matrix_inverse(4, 0.0).data, np.eye(4))

    @pytest.mark.parametrize("s", [2, 4, 128])
    def test_closed_form(self, s):
        for lam in (0.0, 0.001, 1 / (2 * s)):
            forward = np.eye(s) - lam * np.ones((s, s))
            product = forward @ shifting_matrix_inverse(s, lam).data
            np.testing.assert_allclose(product, np.eye(s), atol=1e-13)

    def test_small_example(self):
        forward = np.eye(4) - 0.1 * np.ones((4, 4))
        np.testing.assert_allclose(forward @ shifting_matrix_inverse(4, 0.1).data, np.eye(4), atol=1e-14)

    @pytest.mark.parametrize("s", [2, 4, 128])
    def test_singular(self, s):
        with pytest.raises(SingularShiftError):
            shifting_matrix_inverse(s, 1 / s)


class TestKeyPreprocessing:
    def test_constant_rows_vanish(self):
        m = build_shifting_matrix(4, 1.0, 1.0, Precision.FP64)
        k = np.tile(np.array([[3.0, -1.0, 0.5]]), (4, 1))
        assert np.array_equal(preprocess_keys(k, m, GOLDEN), np.zeros((3, 4)))

    def test_mean_removal(self):
        m = build_shifting_matrix(4, 1.0, 1.0, Precision.FP64)
        k = np.array([[1.0], [2.0], [3.0], [4.0]])
        assert np.array_equal(preprocess_keys(k, m, GOLDEN), [[-1.5, -0.5, 0.5, 1.5]])

    def test_matches_explicit_formula(self, rng):
        beta, alpha = 0.9375, 2.0
        k = rng.normal(size=(4, 3))
        m = build_shifting_matrix(4, beta, alpha, Precision.FP64)
        expected = (k.T - beta * k.mean(axis=0)[:, None]) / alpha
        np.testing.assert_allclose(preprocess_keys(k, m, GOLDEN), expected, atol=1e-12)

    def test_block_size_mismatch(self):
        m = build_shifting_matrix(4, 0.5, 1.0, Precision.FP64)
        with pytest.raises(ContractViolation):
            preprocess_keys(np.ones((8, 2)), m, GOLDEN)


class TestRecovery:
    def test_first_block(self):
        assert np.array_equal(recover_global_mean(None, np.array([[3.0]]), 1, Precision.FP64), [[3.0]])

    def test_second_block(self):
        out = recover_global_mean(np.array([[1.0]]), np.array([[3.0]]), 2, Precision.FP64)
        assert np.array_equal(out, [[2.0]])

    def test_running_mean_of_five(self, rng):
        blocks = [rng.normal(size=(6, 1)) for _ in range(5)]
        f = None
        for j, s_bar in enumerate(blocks, start=1):
            f = recover_global_mean(f, s_bar, j, Precision.FP64)
        np.testing.assert_allclose(f, np.mean(blocks, axis=0), atol=1e-12)

    def test_bad_index(self):
        with pytest.raises(ContractViolation):
            recover_global_mean(None, np.zeros((1, 1)), 0, Precision.FP64)

    @pytest.mark.parametrize("beta", BETAS)
    def test_mean_relationship(self, rng, beta):
        s = rng.normal(size=(16, 64))
        m = build_shifting_matrix(64, beta, 1.0, Precision.FP64)
        recovered = rowmean(s @ m.data, Precision.FP64) / (1 - beta)
        np.testing.assert_allclose(recovered, rowmean(s, Precision.FP64), atol=1e-12)


class TestCorrectionTerms:
    def test_stationary_mean(self):
        x = np.array([[2.5], [-1.0]])
        dm_prev, dm_cur = correction_terms(x, x, x, 0.9)
        assert np.array_equal(dm_prev, np.zeros((2, 1)))
        assert np.array_equal(dm_cur, np.zeros((2, 1)))

    def test_beta_zero(self, rng):
        a, b, c = (rng.normal(size=(3, 1)) for _ in range(3))
        dm_prev, dm_cur = correction_terms(a, b, c, 0.0)
        assert not np.any(dm_prev)
        assert not np.any(dm_cur)

    def test_integer_invariance(self):
        dm_prev, dm_cur = correction_terms(np.array([[1.0]]), np.array([[0.5]]), np.array([[0.0]]), 0.9375)
        assert dm_prev[0, 0] == 7.5
        assert dm_cur[0, 0] == -7.5

    def test_precomputed_invariance_wins(self):
        dm_prev, _ = correction_terms(
            np.array([[1.0]]), np.array([[0.0]]), np.array([[0.0]]), 0.5, invariance=3.0
        )
        assert dm_prev[0, 0] == 3.0

    def test_beta_one_rejected(self):
        with pytest.raises(SingularShiftError):
            correction_terms(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), 1.0)


class TestOnlineState:
    def test_global_mean_tracks_block_means(self, make_problem):
        p = make_problem(n=1, s_q=32, s_kv=160, d=8, s1=32, s2=32, x0=2.0)
        params = PasaParams.create(0.5, p.head_dim, p.s2, Precision.FP64)
        q = p.q_block(0)
        state = OnlineState.initial(q)
        means = []
        for j in range(p.n_kv_blocks):
            k_j, v_j = p.kv_block(j)
            s = q @ preprocess_keys(k_j, params.M, GOLDEN)
            means.append(s.mean(axis=-1, keepdims=True))
            state = pasa_block_update(state, s, v_j, GOLDEN, params.invariance)
        assert state.j == 5
        np.testing.assert_allclose(state.f_bar, np.mean(means, axis=0), atol=1e-12)
        assert np.all(state.l > 0)

    def test_rounded_correction_never_scales_up(self):
        # at 4600 the FP16 spacing is 4, so 4600 + 1.875 rounds back to 4600
        state = OnlineState(
            m=np.full((1, 1), 4600.0), l=np.full((1, 1), 3.0), f_bar=np.full((1, 1), 3.75),
            o_acc=np.full((1, 2), 5.0), j=1,
        )
        scores = np.zeros((1, 2))
        nxt = pasa_block_update(state, scores, np.ones((2, 2)), PASA, 1.0)
        assert nxt.f_bar[0, 0] == 1.875
        assert nxt.m[0, 0] == 4600.0
        assert nxt.l[0, 0] == 3.0
        assert np.array_equal(nxt.o_acc, state.o_acc)

    def test_fp16_denominator_is_bounded_by_block_count(self, bench_problem):
        p = bench_problem(kind="hybrid", x0=20.0, am=100.0, shape=(1, 2, 128, 128), s1=128, s2=32)
        params = PasaParams.create(0.984497, p.head_dim, p.s2)
        q = p.q_block(0)
        state = OnlineState.initial(q)
        for j in range(p.n_kv_blocks):
            k_j, v_j = p.kv_block(j)
            s = gemm(q, preprocess_keys(k_j, params.M, PASA), PASA)
            state = pasa_block_update(state, s, v_j, PASA, params.invariance)
            # every rescale factor is at most 1 and each block adds at most s2
            assert not np.any(state.l > (j + 1) * p.s2)


def _equivalence_cases():
    cases = []
    for seed in range(13):
        s_q, s_kv = [(256, 256), (128, 512)][seed % 2]
        d = [16, 64][(seed // 2) % 2]
        for beta in (0.0, 0.5, 0.9375, 0.984497):
            cases.append((seed, s_q, s_kv, d, beta))
    return cases


class TestPasaAttention:
    @pytest.mark.parametrize("seed, s_q, s_kv, d, beta", _equivalence_cases())
    def test_fp64_equals_golden(self, make_problem, seed, s_q, s_kv, d, beta):
        p = make_problem(n=1, s_q=s_q, s_kv=s_kv, d=d, s1=64, s2=64, x0=2.0, am=1.5, seed=seed)
        params = PasaParams.create(beta, d, 64, Precision.FP64)
        out, _ = pasa_attention(p, params, GOLDEN)
        assert relative_rmse(out, golden_attention(p)) <= 1e-10

    @pytest.mark.parametrize("policy", list(PolicyName))
    def test_beta_zero_is_flash(self, bench_problem, policy):
        p = bench_problem(x0=5.0, am=2.0, shape=(1, 1, 128, 64), s1=64, s2=64)
        params = PasaParams.create(0.0, p.head_dim, p.s2)
        pol = get_policy(policy)
        out, diag = pasa_attention(p, params, pol)
        assert diag.degraded_to_flash
        assert np.array_equal(out, flash_attention(p, pol), equal_nan=True)

    def test_translation_invariance(self, make_problem):
        p = make_problem(n=1, s_q=128, s_kv=256, d=16, s1=64, s2=64, x0=1.0)
        shift = np.linspace(-3, 3, p.head_dim)
        moved = AttentionProblem(p.q, p.k + shift, p.v, p.s1, p.s2)
        np.testing.assert_allclose(golden_attention(moved), golden_attention(p), atol=1e-10)
        params = PasaParams.create(0.9375, p.head_dim, p.s2, Precision.FP64)
        a, _ = pasa_attention(p, params, GOLDEN)
        b, _ = pasa_attention(moved, params, GOLDEN)
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_block_size_invariance(self, make_problem):
        base = make_problem(n=2, s_q=128, s_kv=256, d=16, s1=64, s2=64, x0=3.0)
        outs = []
        for s2 in (64, 128):
            p = AttentionProblem(base.q, base.k, base.v, 64, s2)
            out, _ = pasa_attention(p, PasaParams.create(0.984497, 16, s2, Precision.FP64), GOLDEN)
            outs.append(out)
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-10)

    def test_shift_shrinks_scores(self, make_problem):
        p = make_problem(n=1, s_q=128, s_kv=256, d=64, s1=64, s2=64, x0=10.0, am=1.0)
        params = PasaParams.create(0.984497, 64, 64, Precision.FP64)
        _, diag = pasa_attention(p, params, GOLDEN, diagnose=True)
        before = max(abs(v) for v in diag.unshifted_range)
        after = max(abs(v) for v in diag.shifted_range)
        assert after <= 0.2 * before

    def test_fp16_avoids_overflow(self, bench_problem):
        p = bench_problem(x0=30.0, am=0.5)
        params = PasaParams.create(0.984497, p.head_dim, p.s2)
        out, diag = pasa_attention(p, params, PASA)
        assert nan_stats(out) == 0.0
        assert diag.nonfinite_scores == 0
        assert nan_stats(flash_attention(p, get_policy(PolicyName.FA_PARTIAL_FP16))) == 100.0

    def test_diagnostics_shape(self, bench_problem):
        p = bench_problem(x0=10.0, am=0.5, shape=(1, 2, 256, 64), s1=64, s2=128)
        params = PasaParams.create(0.984497, 64, 128)
        _, diag = pasa_attention(p, params, PASA)
        assert diag.shifted_block_min.shape == (4, 2)
        assert diag.unshifted_range is None
        lo, hi = diag.shifted_range
        assert lo <= hi

    def test_param_mismatch(self, make_problem):
        p = make_problem(s_q=64, s_kv=64, d=16, s1=64, s2=64)
        with pytest.raises(ContractViolation):
            pasa_attention(p, PasaParams.create(0.5, 16, 32), GOLDEN)
        with pytest.raises(ContractViolation):
            pasa_attention(p, PasaParams.create(0.5, 64, 64), GOLDEN)
