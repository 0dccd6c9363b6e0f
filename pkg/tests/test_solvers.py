import numpy as np
import pytest

from oracles import random_spd
from rafsel.exceptions import ConfigError, DimensionError
from rafsel.generator import PdeSpec, generate_convection_diffusion, generate_poisson2d
from rafsel.solvers import (LabelRecord, Method, MethodCatalog, SolveConfig, SolveOutcome,
                            Status, build_preconditioner, catalog_for, label_matrix, make_rhs,
                            selected_cost, slowdown, solve, spmv)
from rafsel.sparse import CsrMatrix

PRECONDS = ("none", "jacobi", "bjacobi", "ssor", "ilu0")


def outcome(status="Converged", walltime=1.0, work=100, iterations=10):
    return SolveOutcome(Status(status), iterations, 1e-7 if status == "Converged" else 1.0,
                        walltime, work)


class TestSpmv:
    def test_identity(self):
        x = np.arange(5.0)
        np.testing.assert_array_equal(spmv(CsrMatrix.from_dense(np.eye(5)), x), x)

    def test_diagonal(self):
        np.testing.assert_array_equal(spmv(CsrMatrix.from_dense(np.diag([2.0, 3.0])),
                                           np.ones(2)), [2, 3])

    def test_poisson_row_sums(self):
        y = spmv(generate_poisson2d(3, 3), np.ones(9))
        assert y[4] == 0
        assert y[0] == y[2] == y[6] == y[8] == 2
        assert y[1] == 1

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            spmv(CsrMatrix.from_dense(np.eye(3)), np.ones(2))


class TestSolve:
    def test_identity_cg(self):
        b = np.array([1.0, -2.0, 3.0])
        out = solve(CsrMatrix.from_dense(np.eye(3)), b, "cg+none")
        assert out.status is Status.CONVERGED and out.iterations == 1
        np.testing.assert_allclose(out.x, b)

    @pytest.mark.parametrize("solver", ["cg", "gmres", "bicgstab"])
    def test_diagonal_jacobi_is_exact(self, solver):
        d = np.array([1.0, 2.0, 5.0, 10.0])
        b = np.array([3.0, -1.0, 2.0, 7.0])
        out = solve(CsrMatrix.from_dense(np.diag(d)), b, Method(solver, "jacobi"))
        assert out.converged and out.final_relres <= 1e-6
        np.testing.assert_allclose(out.x, b / d, rtol=1e-10)

    def test_poisson_cg_regression(self, poisson31):
        b = spmv(poisson31, np.ones(961))
        out = solve(poisson31, b, "cg+none")
        assert out.converged
        assert np.max(np.abs(out.x - 1)) <= 1e-4
        assert out.iterations == 52

    @pytest.mark.parametrize("prec", PRECONDS)
    def test_poisson_all_preconditioners(self, poisson31, prec):
        b = spmv(poisson31, np.ones(961))
        for solver in ("cg", "gmres", "bicgstab"):
            out = solve(poisson31, b, Method(solver, prec))
            assert out.converged, (solver, prec, out.status)
            # residual contract re-verified outside the solver
            assert np.linalg.norm(b - spmv(poisson31, out.x)) / np.linalg.norm(b) <= 1e-6

    def test_cg_rejects_nonsymmetric_pattern(self):
        A = CsrMatrix.from_dense([[2.0, 1.0], [0.0, 2.0]])
        assert solve(A, np.ones(2), "cg+none").status is Status.BREAKDOWN

    def test_zero_diagonal_breaks_down(self):
        A = CsrMatrix.from_dense([[0.0, 1.0], [1.0, 0.0]])
        for prec in ("jacobi", "ssor", "ilu0"):
            assert solve(A, np.ones(2), Method("gmres", prec)).status is Status.BREAKDOWN

    def test_iteration_cap(self, poisson31):
        out = solve(poisson31, np.ones(961), "cg+none", SolveConfig(max_iters=3))
        assert out.status is Status.MAX_ITERS and out.iterations <= 3

    def test_convection_diffusion_nonsymmetric_solvers(self):
        A = generate_convection_diffusion(PdeSpec("convdiff", 30, 30, cx=1.0, cy=0.5,
                                                  peclet=2.0))
        b = spmv(A, np.ones(A.order))
        for m in ("gmres+none", "gmres+ilu0", "bicgstab+none", "bicgstab+ilu0"):
            out = solve(A, b, m)
            assert out.converged, m
            assert np.max(np.abs(out.x - 1)) <= 1e-4

    def test_bad_rhs(self):
        A = CsrMatrix.from_dense(np.eye(2))
        with pytest.raises(DimensionError):
            solve(A, np.zeros(2), "cg+none")
        with pytest.raises(DimensionError):
            solve(A, np.ones(3), "cg+none")

    def test_deterministic(self, poisson31):
        b = spmv(poisson31, np.ones(961))
        a, c = solve(poisson31, b, "bicgstab+ssor"), solve(poisson31, b, "bicgstab+ssor")
        assert a.iterations == c.iterations and a.work == c.work
        np.testing.assert_array_equal(a.x, c.x)

    @pytest.mark.parametrize("prec", PRECONDS)
    def test_dense_agreement(self, rng, prec):
        cfg = SolveConfig(rtol=1e-14)
        for _ in range(10):
            n = int(rng.integers(1, 13))
            D = random_spd(rng, n)
            b = rng.standard_normal(n)
            out = solve(CsrMatrix.from_dense(D), b, Method("cg", prec), cfg)
            if out.converged:
                assert np.max(np.abs(out.x - np.linalg.solve(D, b))) <= 1e-8


class TestPreconditioners:
    def test_jacobi_diag(self):
        M = build_preconditioner(CsrMatrix.from_dense(np.diag([2.0, 4.0])), "jacobi")
        np.testing.assert_array_equal(M.apply(np.array([2.0, 4.0])), [1, 1])

    @pytest.mark.parametrize("omega", [0.5, 1.0, 1.5])
    def test_ssor_on_diagonal(self, omega):
        d = np.array([2.0, 3.0, 8.0])
        r = np.array([1.0, -2.0, 4.0])
        M = build_preconditioner(CsrMatrix.from_dense(np.diag(d)), "ssor",
                                 SolveConfig(omega=omega))
        np.testing.assert_allclose(M.apply(r), omega * (2 - omega) * r / d, rtol=1e-14)

    def test_ilu0_exact_without_fill(self, rng):
        # a tridiagonal matrix has no fill outside its own pattern
        n = 20
        D = np.diag(rng.uniform(4, 5, n)) + np.diag(rng.uniform(-1, 1, n - 1), 1) \
            + np.diag(rng.uniform(-1, 1, n - 1), -1)
        M = build_preconditioner(CsrMatrix.from_dense(D), "ilu0")
        r = rng.standard_normal(n)
        z = M.apply(r)
        assert np.linalg.norm(D @ z - r) / np.linalg.norm(r) <= 1e-12
        L, U = M.factors()
        np.testing.assert_allclose(L @ U, D, atol=1e-12)

    def test_block_jacobi_exact_on_block_diagonal(self, rng):
        D = np.zeros((8, 8))
        for k in (0, 4):
            D[k:k + 4, k:k + 4] = random_spd(rng, 4)
        M = build_preconditioner(CsrMatrix.from_dense(D), "bjacobi")
        r = rng.standard_normal(8)
        np.testing.assert_allclose(D @ M.apply(r), r, atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            build_preconditioner(CsrMatrix.from_dense(np.eye(2)), "amg")


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(rtol=0), dict(rtol=1), dict(max_iters=0),
                                    dict(timeout=0), dict(gmres_restart=0), dict(omega=2.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SolveConfig(**kw)

    def test_default_cap(self):
        assert SolveConfig().iteration_cap(961) == 9610
        assert SolveConfig().iteration_cap(10**6) == 20000

    def test_method_parse(self):
        assert Method.parse("gmres+ilu0") == Method("gmres", "ilu0")
        assert Method.parse("cg") == Method("cg", "none")
        with pytest.raises(ConfigError):
            Method.parse("lsqr+none")


class TestCatalog:
    def test_default_has_fifteen(self):
        assert MethodCatalog.default().k == 15

    def test_duplicates_rejected(self):
        with pytest.raises(ConfigError):
            catalog_for(["cg+none", "cg+none"])

    def test_needs_two(self):
        with pytest.raises(ConfigError):
            catalog_for(["cg+none"])

    def test_json_roundtrip(self):
        cat = catalog_for(["cg+ilu0", "gmres+none"])
        back = MethodCatalog.from_json(cat.to_json())
        assert back == cat and back.fingerprint == cat.fingerprint
        assert catalog_for(["gmres+none", "cg+ilu0"]).fingerprint != cat.fingerprint


class TestLabeling:
    def test_argmin(self):
        rec = LabelRecord("a", [outcome(walltime=0.10), outcome(walltime=0.25)])
        assert rec.optimal_index == 0 and rec.label.tolist() == [1, 0]

    def test_failures_excluded(self):
        rec = LabelRecord("a", [outcome("Diverged", walltime=0.01), outcome(walltime=1.0)])
        assert rec.optimal_index == 1

    def test_unlabelable(self):
        rec = LabelRecord("a", [outcome("Diverged"), outcome("Timeout")])
        assert rec.unlabelable and not rec.label.any()

    def test_ties_go_to_lower_index(self):
        rec = LabelRecord("a", [outcome(work=5), outcome(work=3), outcome(work=3)],
                          rank_by="iterations")
        assert rec.optimal_index == 1

    def test_dict_roundtrip(self):
        rec = LabelRecord("a", [outcome(work=5), outcome("MaxIters", work=9)],
                          rank_by="iterations")
        d = rec.to_dict()
        assert "walltime" not in d["outcomes"][0]
        back = LabelRecord.from_dict(d)
        assert back.optimal_index == 0 and back.outcomes[1].status is Status.MAX_ITERS

    def test_label_matrix_iterations_deterministic(self, poisson31):
        cat = catalog_for(["cg+none", "cg+ilu0", "gmres+jacobi"])
        a = label_matrix(poisson31, cat, rank_by="iterations")
        b = label_matrix(poisson31, cat, rank_by="iterations")
        assert a.to_dict() == b.to_dict()
        assert a.outcomes[a.optimal_index].converged

    def test_label_matrix_walltime(self):
        A = generate_poisson2d(8, 8)
        rec = label_matrix(A, catalog_for(["cg+none", "cg+jacobi"]), repeats=2)
        assert rec.optimal_index in (0, 1)
        assert all(o.walltime >= 0 for o in rec.outcomes)

    def test_bad_rank_mode(self, poisson31):
        with pytest.raises(ConfigError):
            label_matrix(poisson31, MethodCatalog.default(), rank_by="luck")

    def test_rhs_policies(self, poisson31):
        np.testing.assert_array_equal(make_rhs(poisson31), spmv(poisson31, np.ones(961)))
        assert np.all(make_rhs(poisson31, "ones") == 1)
        v = make_rhs(poisson31, "random", seed=3)
        assert np.isclose(np.linalg.norm(v), 1)
        with pytest.raises(ConfigError):
            make_rhs(poisson31, "zeros")


class TestSlowdown:
    def test_optimal_selection(self):
        rec = LabelRecord("a", [outcome(walltime=0.36), outcome(walltime=1.0)])
        assert slowdown(rec, 0) == 1.0

    def test_ratio(self):
        rec = LabelRecord("a", [outcome(walltime=0.36), outcome(walltime=1.0)])
        assert slowdown(rec, 1) == pytest.approx(0.36)

    def test_failed_selection(self):
        rec = LabelRecord("a", [outcome(walltime=0.36), outcome("Diverged")])
        assert slowdown(rec, 1) == 0.0

    def test_bad_index(self):
        rec = LabelRecord("a", [outcome(), outcome()])
        with pytest.raises(IndexError):
            slowdown(rec, 2)

    def test_selected_cost(self):
        rec = LabelRecord("a", [outcome(work=10), outcome("MaxIters", work=4)],
                          rank_by="iterations")
        assert selected_cost(rec, 0) == 10
        assert selected_cost(rec, 1) == 10
        wall = LabelRecord("b", [outcome(walltime=2.0), outcome("Diverged")])
        assert selected_cost(wall, 1, SolveConfig(timeout=7.0)) == 7.0
