import dataclasses

import numpy as np
import pytest

from test_transcription import biped_scenario, foot_surface, stepping_scenario

from kinomo import transcription
from kinomo.contact import (
    ContactPhase,
    ContactWrenchCom,
    com_to_cop,
    cop_wrench_feasibility,
)
from kinomo.dynamics import MomentumState, RobotConstants
from kinomo.solver import (
    SolverOptions,
    _solve_dense_qp,
    estimate_factorization_flops,
    kkt_residual,
    solve,
    solve_ipm,
    solve_sqp_dense,
)
from kinomo.transcription import (
    MomentumScenario,
    NlpProblem,
    TrackingWeights,
    build_sequential,
    build_simultaneous,
    extract_sequential,
)


def one_contact_scenario(T=3, delta=0.1):
    phases = (ContactPhase("foot", 0, T, foot_surface(0.0)),)
    consts = RobotConstants(M=30.0)
    h0 = MomentumState(np.array([0.0, 0.0, 0.5]), np.zeros(3), np.zeros(3))
    h_ref = np.tile(h0.as_vector(), (T + 1, 1))
    force_ref = {0: np.tile([0.0, 0.0, 30.0 * 9.81], (T, 1))}
    return MomentumScenario(phases, T, delta, h0, consts, h_ref, force_ref)


def convex_variant(p):
    """Same problem with the nonconvex CoP rows dropped (affine subclass)."""
    metas = [m for m in p.ineq_meta if m[2] == "friction"]
    q = NlpProblem(
        p.layout, p.objective, [], list(p.ineq_affine), [], p.scenario, [], metas
    )
    q.jacobian_pattern = transcription.jacobian_pattern(q)
    q.hessian_pattern = transcription.hessian_pattern(q)
    return q


class TestOptions:
    def test_defaults(self):
        o = SolverOptions()
        assert o.max_iter == 200 and o.kkt_tol == 1e-6 and o.backend == "ipm"

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            SolverOptions(kkt_tol=0.0)
        with pytest.raises(ValueError):
            SolverOptions(mu_reduction=1.5)
        with pytest.raises(ValueError):
            SolverOptions(backend="newton")


class TestDenseQP:
    def test_clipped_scalar(self):
        # min (x-2)^2 s.t. x <= 1  ->  x = 1, multiplier 2
        d, z, y = _solve_dense_qp(
            np.array([[2.0]]),
            np.array([-4.0]),
            np.array([[-1.0]]),
            np.array([1.0]),
            np.zeros((0, 1)),
            np.zeros(0),
        )
        assert abs(d[0] - 1.0) < 1e-8
        assert abs(z[0] - 2.0) < 1e-6

    def test_equality(self):
        # min x^2 + y^2 s.t. x + y = 1
        d, z, y = _solve_dense_qp(
            2.0 * np.eye(2),
            np.zeros(2),
            np.zeros((0, 2)),
            np.zeros(0),
            np.array([[1.0, 1.0]]),
            np.array([-1.0]),
        )
        assert np.allclose(d, [0.5, 0.5], atol=1e-9)

    def test_inactive_constraint(self):
        d, _, _ = _solve_dense_qp(
            np.array([[2.0]]),
            np.array([-4.0]),
            np.array([[1.0]]),
            np.array([10.0]),  # x >= -10, inactive
            np.zeros((0, 1)),
            np.zeros(0),
        )
        assert abs(d[0] - 2.0) < 1e-8


class TestIpm:
    def test_tiny_contact_instance_kkt(self):
        p = build_sequential(one_contact_scenario())
        res = solve_ipm(p, SolverOptions(kkt_tol=1e-8))
        assert res.converged
        assert max(kkt_residual(p, res.x, res.z, res.y)) <= 1e-8

    def test_double_support_reaches_reference(self):
        p = build_sequential(biped_scenario(6))
        res = solve_ipm(p)
        assert res.converged
        # the reference is exactly attainable: zero tracking cost
        assert res.objective < 1e-8
        sol = extract_sequential(p, res.x)
        assert np.allclose(sol["h"], p.scenario.h_ref, atol=1e-4)

    def test_simultaneous_backend(self):
        p = build_simultaneous(biped_scenario(6))
        res = solve_ipm(p)
        assert res.converged
        assert res.objective < 1e-8
        assert res.y.size == p.n_eq

    def test_stepping_feasible_at_solution(self):
        scn = stepping_scenario()
        p = build_sequential(scn)
        res = solve_ipm(p, SolverOptions(max_iter=300))
        assert res.converged
        sol = extract_sequential(p, res.x)
        for t in range(scn.T):
            for i in scn.active_at(t):
                ph = scn.phases[i]
                w = com_to_cop(
                    ContactWrenchCom(sol["forces"][i][t], sol["kappas"][i][t]),
                    ph.surface,
                    sol["h"][t, :3],
                )
                verdict = cop_wrench_feasibility(ph, w, tol=1e-6)
                assert verdict["feasible"], (t, i, verdict)

    def test_mu_schedule_monotone(self):
        p = build_sequential(biped_scenario(6))
        res = solve_ipm(p)
        mus = [st.mu for st in res.stats]
        assert all(b <= a for a, b in zip(mus, mus[1:]))
        assert all(0.0 < st.alpha <= 1.0 for st in res.stats[:-1])

    def test_infeasible_scenario_flagged(self):
        # demand a huge lateral force that friction cannot supply
        scn = biped_scenario(4)
        scn.h_ref[:, 3] = 1e4  # linear momentum x
        p = build_sequential(scn)
        res = solve_ipm(p, SolverOptions(max_iter=60))
        # the problem stays feasible (tracking is soft) so it must not
        # report Infeasible; the solution saturates the friction cone
        assert res.status in ("Converged", "MaxIter")
        assert res.kkt[1] <= 1e-6


class TestConvexSubclass:
    def test_matches_dense_reference(self):
        # unit force weight and a single contact keep the QP strictly
        # convex so all three solvers pin the same minimizer; with two
        # feet the affine subclass leaves a shared angular-impulse
        # direction unpenalized and the solution set is a subspace
        scn = dataclasses.replace(
            one_contact_scenario(T=8), weights=TrackingWeights(force=1.0)
        )
        p = convex_variant(build_sequential(scn))
        obj = p.compiled_objective()
        ineq = p.compiled_ineq()
        x0 = np.zeros(p.n)
        d_ref, _, _ = _solve_dense_qp(
            obj.H.toarray(),
            obj.gradient(x0),
            ineq.jacobian(x0).toarray(),
            ineq.value(x0),
            np.zeros((0, p.n)),
            np.zeros(0),
        )
        for backend in ("ipm", "sqp_dense"):
            res = solve(p, SolverOptions(backend=backend, kkt_tol=1e-10, max_iter=300))
            assert np.abs(res.x - d_ref).max() < 1e-8, backend


class TestBackendsAgree:
    def test_objective_agreement(self):
        p = build_sequential(stepping_scenario())
        r_ipm = solve(p, SolverOptions(max_iter=300))
        r_sqp = solve(p, SolverOptions(backend="sqp_dense", max_iter=60))
        assert r_ipm.converged
        rel = abs(r_ipm.objective - r_sqp.objective) / (1.0 + abs(r_ipm.objective))
        assert rel < 1e-4


class TestDiagnostics:
    def test_kkt_residual_blocks(self):
        p = build_sequential(biped_scenario(4))
        x = np.zeros(p.n)
        z = np.zeros(p.n_ineq)
        stat, primal, dual, comp = kkt_residual(p, x, z, np.zeros(0))
        g = p.compiled_objective().gradient(x)
        assert stat == pytest.approx(np.abs(g).max())
        assert dual == 0.0 and comp == 0.0
        # negative dual shows up in the dual-feasibility block
        z[0] = -1.0
        assert kkt_residual(p, x, z, np.zeros(0))[2] == 1.0

    def test_flops_estimate_scales_linearly(self):
        f = {T: estimate_factorization_flops(build_sequential(biped_scenario(T)))
             for T in (20, 40, 80)}
        assert f[40] / f[20] <= 2.2
        assert f[80] / f[40] <= 2.2

    def test_result_properties(self):
        p = build_sequential(biped_scenario(4))
        res = solve(p)
        assert res.converged and res.status == "Converged"
        assert len(res.stats) >= 1
        assert res.stats[-1].kkt <= 1e-6
