import warnings

import numpy as np
import pytest

from gbpkit.dictionary import L1, L2, Dictionary, GroupPartition, RegularizerSpec, elastic, mutual_coherence
from gbpkit.errors import InvalidInputError, InvalidStructureError
from gbpkit.solver import (
    ConvergenceWarning,
    LayeredProblem,
    SolveOptions,
    build_block_problem,
    gbp_objective,
    optimality_residual,
    prox_step,
    rewrite_single_layer,
    rewritten_coherence,
    solve_gbp,
    solve_gbp_batch,
    solve_layered_gbp,
    solve_positive_gbp,
)

from oracles import block_soft_threshold, elastic_prox_residual, lasso_cd, prox_reference, soft_threshold

TIGHT = SolveOptions(tol=1e-11, max_iter=100000)


def random_problem(rng, n=20, m=40, size=4, tags=(L2,), gamma=0.3):
    part = GroupPartition.contiguous(m, size)
    norms = tuple(tags[k % len(tags)] for k in range(part.n_groups))
    spec = RegularizerSpec(part, norms, np.full(part.n_groups, gamma))
    D = Dictionary.normalized(rng.standard_normal((n, m)))
    x = rng.standard_normal(n)
    return D, spec, x


class TestProx:
    def test_soft_threshold_known_values(self):
        spec = RegularizerSpec.uniform(GroupPartition.singletons(4), L1, 1.0)
        out = prox_step(np.array([3.0, -0.5, -2.0, 1.0]), 0.5, spec)
        np.testing.assert_allclose(out, [2.5, 0.0, -1.5, 0.5])

    def test_block_threshold_known_values(self):
        spec = RegularizerSpec.uniform(GroupPartition(((0, 1), (2, 3))), L2, 1.0)
        out = prox_step(np.array([3.0, 4.0, 0.3, 0.4]), 1.0, spec)
        np.testing.assert_allclose(out, [2.4, 3.2, 0.0, 0.0])

    def test_matches_reference_for_mixed_tags(self):
        rng = np.random.default_rng(42)
        part = GroupPartition.contiguous(30, 3)
        norms = tuple((L1, L2, elastic(0.35))[k % 3] for k in range(part.n_groups))
        w = rng.uniform(0.2, 1.5, part.n_groups)
        spec = RegularizerSpec(part, norms, w)
        tags = [("l1",) if n == L1 else ("l2",) if n == L2 else ("el", n.beta) for n in norms]
        for _ in range(50):
            v = rng.standard_normal(30) * 2
            np.testing.assert_allclose(prox_step(v, 0.8, spec), prox_reference(v, 0.8, part.groups, tags, w),
                                       atol=1e-14)

    def test_elastic_optimality(self):
        rng = np.random.default_rng(42)
        spec = RegularizerSpec.uniform(GroupPartition.contiguous(20, 5), elastic(0.4), 1.0)
        for _ in range(50):
            v = rng.standard_normal(20) * 1.5
            p = prox_step(v, 0.6, spec)
            for g in spec.partition.groups:
                g = list(g)
                assert elastic_prox_residual(v[g], p[g], 0.6, 0.4) < 1e-12

    def test_nonnegative_clips(self):
        spec = RegularizerSpec.uniform(GroupPartition.singletons(3), L1, 1.0)
        out = prox_step(np.array([2.0, -3.0, 0.5]), 1.0, spec, nonnegative=True)
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0])

    def test_nonnegative_l2(self):
        spec = RegularizerSpec.uniform(GroupPartition(((0, 1, 2),)), L2, 1.0)
        out = prox_step(np.array([3.0, -5.0, 4.0]), 1.0, spec, nonnegative=True)
        np.testing.assert_allclose(out, block_soft_threshold(np.array([3.0, 0.0, 4.0]), 1.0))

    def test_rejects_bad_step(self):
        spec = RegularizerSpec.uniform(GroupPartition.singletons(2), L1, 1.0)
        with pytest.raises(InvalidInputError):
            prox_step(np.zeros(2), 0.0, spec)

    def test_rejects_length_mismatch(self):
        spec = RegularizerSpec.uniform(GroupPartition.singletons(2), L1, 1.0)
        with pytest.raises(InvalidInputError):
            prox_step(np.zeros(3), 1.0, spec)


class TestSolve:
    def test_lasso_matches_coordinate_descent(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            D, _, x = random_problem(rng)
            spec = RegularizerSpec.uniform(GroupPartition.singletons(40), L1, 0.2)
            ref = lasso_cd(D.matrix, x, 0.2)
            got = solve_gbp(x, D, spec, TIGHT)
            assert got.converged
            np.testing.assert_allclose(got.values, ref, atol=1e-8)

    def test_orthonormal_closed_form(self):
        rng = np.random.default_rng(42)
        Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        spec = RegularizerSpec.uniform(GroupPartition.contiguous(8, 2), L2, 0.5)
        x = rng.standard_normal(8)
        expected = prox_step(Q.T @ x, 1.0, spec)
        np.testing.assert_allclose(solve_gbp(x, Dictionary(Q), spec, TIGHT).values, expected, atol=1e-10)

    def test_frozen_small_instance(self):
        # two atoms at 60 degrees, l1 weight 0.1; both entries positive, so
        # g = inv(G) (D^T x - 0.1) on the full support
        D = Dictionary(np.array([[1.0, 0.5], [0.0, np.sqrt(0.75)]]))
        spec = RegularizerSpec.uniform(GroupPartition.singletons(2), L1, 0.1)
        x = np.array([1.0, 1.0])
        expected = lasso_cd(D.matrix, x, 0.1)
        np.testing.assert_allclose(expected, [14 / 15 - np.sqrt(3) / 3, 2 * np.sqrt(3) / 3 - 1 / 15], atol=1e-12)
        np.testing.assert_allclose(solve_gbp(x, D, spec, TIGHT).values, expected, atol=1e-9)

    def test_residual_zero_at_solution(self):
        rng = np.random.default_rng(42)
        D, spec, x = random_problem(rng, tags=(L1, L2, elastic(0.5)))
        r = solve_gbp(x, D, spec, TIGHT)
        assert optimality_residual(r.values, x, D, spec) < 1e-9
        assert optimality_residual(np.zeros(40) + 0.1, x, D, spec) > 1e-3

    def test_objective_is_minimal(self):
        rng = np.random.default_rng(42)
        D, spec, x = random_problem(rng, tags=(L1, L2, elastic(0.5)))
        r = solve_gbp(x, D, spec, TIGHT)
        f0 = gbp_objective(r.values, x, D, spec)
        assert r.objective == pytest.approx(float(f0))
        for _ in range(20):
            assert gbp_objective(r.values + 1e-3 * rng.standard_normal(40), x, D, spec) >= f0 - 1e-12

    def test_large_gamma_gives_zero(self):
        rng = np.random.default_rng(42)
        D, spec, x = random_problem(rng, gamma=100.0)
        r = solve_gbp(x, D, spec)
        assert not np.any(r.values) and r.converged

    def test_warm_start_agrees(self):
        rng = np.random.default_rng(42)
        D, spec, x = random_problem(rng)
        a = solve_gbp(x, D, spec, TIGHT)
        b = solve_gbp(x, D, spec, TIGHT, init=rng.standard_normal(40) * 5)
        np.testing.assert_allclose(a.values, b.values, atol=1e-8)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(42)
        D, spec, _ = random_problem(rng)
        X = rng.standard_normal((6, 20))
        batch = solve_gbp_batch(X, D, spec, TIGHT)
        for i in range(6):
            np.testing.assert_allclose(batch.codes[i], solve_gbp(X[i], D, spec, TIGHT).values, atol=1e-12)

    def test_jobs_do_not_change_results(self):
        rng = np.random.default_rng(42)
        D, spec, _ = random_problem(rng)
        X = rng.standard_normal((5, 20))
        a = solve_gbp_batch(X, D, spec, TIGHT, jobs=1)
        b = solve_gbp_batch(X, D, spec, TIGHT, jobs=2)
        np.testing.assert_array_equal(a.codes, b.codes)

    def test_unaccelerated_agrees(self):
        rng = np.random.default_rng(42)
        D, spec, x = random_problem(rng)
        a = solve_gbp(x, D, spec, TIGHT)
        b = solve_gbp(x, D, spec, SolveOptions(tol=1e-11, max_iter=200000, acceleration=False))
        np.testing.assert_allclose(a.values, b.values, atol=1e-8)

    def test_convergence_warning(self):
        rng = np.random.default_rng(42)
        D, spec, x = random_problem(rng, gamma=0.01)
        with pytest.warns(ConvergenceWarning):
            r = solve_gbp(x, D, spec, SolveOptions(max_iter=3, tol=1e-12))
        assert not r.converged and r.iterations <= 3

    def test_rejects_dimension_mismatch(self):
        rng = np.random.default_rng(42)
        D, spec, _ = random_problem(rng)
        with pytest.raises(InvalidInputError, match="signal length"):
            solve_gbp(np.zeros(7), D, spec)

    def test_rejects_nonfinite_signal(self):
        rng = np.random.default_rng(42)
        D, spec, x = random_problem(rng)
        x[0] = np.inf
        with pytest.raises(InvalidInputError):
            solve_gbp(x, D, spec)

    def test_only_fixed_step(self):
        with pytest.raises(InvalidInputError, match="fixed"):
            SolveOptions(step_rule="backtracking")

    def test_positive_solution_is_nonnegative(self):
        rng = np.random.default_rng(42)
        D, spec, x = random_problem(rng, tags=(L1, L2))
        r = solve_positive_gbp(x, D, spec, TIGHT)
        assert np.all(r.values >= 0)
        assert optimality_residual(r.values, x, D, spec, nonnegative=True) < 1e-9


class TestLayered:
    def make(self, rng, sizes=(12, 16, 20)):
        ds = [Dictionary.normalized(rng.standard_normal((sizes[j], sizes[j + 1]))) for j in range(len(sizes) - 1)]
        specs = [RegularizerSpec.uniform(GroupPartition.contiguous(d.n_atoms, 4), L2, 0.05) for d in ds]
        return LayeredProblem(tuple(ds), tuple(specs))

    def test_cascade(self):
        rng = np.random.default_rng(42)
        prob = self.make(rng)
        x = rng.standard_normal(12)
        res = solve_layered_gbp(x, prob, TIGHT)
        np.testing.assert_allclose(res.codes[0], solve_gbp(x, prob.dictionaries[0], prob.specs[0], TIGHT).values)
        np.testing.assert_allclose(res.codes[1],
                                   solve_gbp(res.codes[0], prob.dictionaries[1], prob.specs[1], TIGHT).values)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(42)
        d1 = Dictionary.normalized(rng.standard_normal((5, 6)))
        d2 = Dictionary.normalized(rng.standard_normal((7, 8)))
        s1 = RegularizerSpec.uniform(GroupPartition.singletons(6), L1, 1.0)
        s2 = RegularizerSpec.uniform(GroupPartition.singletons(8), L1, 1.0)
        with pytest.raises(InvalidStructureError):
            LayeredProblem((d1, d2), (s1, s2))

    def test_rewrite_block_structure(self):
        rng = np.random.default_rng(42)
        prob = self.make(rng)
        bp = rewrite_single_layer(prob, rng.standard_normal(12))
        assert bp.matrix.shape == (12 + 16, 16 + 20)
        np.testing.assert_allclose(bp.scales[:16], np.sqrt(2.0))
        np.testing.assert_allclose(bp.scales[16:], 1.0)
        np.testing.assert_allclose(bp.renormalized_spec.weights[:4], 0.05 / np.sqrt(2.0))
        assert bp.dictionary.unit_normed

    def test_rewrite_objective_identity(self):
        rng = np.random.default_rng(42)
        prob = self.make(rng)
        bp = rewrite_single_layer(prob, rng.standard_normal(12))
        for _ in range(5):
            xt = rng.standard_normal(36)
            assert bp.objective(bp.recover(xt)) == pytest.approx(bp.renormalized_objective(xt), rel=1e-12)

    def test_closed_form_coherence(self):
        rng = np.random.default_rng(42)
        for sizes in ((10, 12, 16), (8, 12, 12, 16)):
            prob = self.make(rng, sizes)
            bp = rewrite_single_layer(prob)
            assert rewritten_coherence(prob.dictionaries) == pytest.approx(mutual_coherence(bp.dictionary),
                                                                           abs=1e-12)

    def test_unequal_norms_in_l2_group_rejected(self):
        spec = RegularizerSpec.uniform(GroupPartition(((0, 1),)), L2, 1.0)
        with pytest.raises(InvalidStructureError, match="unequal norms"):
            build_block_problem([[np.array([[1.0, 2.0]])]], spec)

    def test_l1_group_with_unequal_norms_is_split(self):
        spec = RegularizerSpec.uniform(GroupPartition(((0, 1),)), L1, 1.0)
        bp = build_block_problem([[np.array([[1.0, 2.0]])]], spec)
        assert bp.renormalized_spec.partition.n_groups == 2
        np.testing.assert_allclose(bp.renormalized_spec.weights, [1.0, 0.5])

    def test_ragged_blocks(self):
        spec = RegularizerSpec.uniform(GroupPartition.singletons(3), L1, 1.0)
        with pytest.raises(InvalidStructureError):
            build_block_problem([[np.ones((2, 2)), np.ones((3, 1))]], spec)


def test_soft_threshold_oracle_sanity():
    np.testing.assert_allclose(soft_threshold(np.array([-2.0, 0.5]), 1.0), [-1.0, 0.0])


def test_no_warning_on_success():
    rng = np.random.default_rng(42)
    D, spec, x = random_problem(rng)
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        solve_gbp(x, D, spec)
