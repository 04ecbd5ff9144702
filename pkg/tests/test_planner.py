import numpy as np
import pytest

from kinomo.contact import ContactPhase, ContactSurface
from kinomo.kinematics import forward_kinematics
from kinomo.planner import (
    PlanOptions,
    PlannerError,
    initialize_references,
    momentum_mismatch,
    plan,
)
from kinomo.scenario import Scenario, make_standing_scenario, make_stepping_scenario
from kinomo.solver import SolverOptions

G = 9.81


def one_foot_scenario(T=6):
    base = make_standing_scenario(T=T)
    phases = (ContactPhase("l_foot", 0, T, base.phases[0].surface),)
    return Scenario(
        "one_foot", base.model, base.q0, phases, T, base.delta, base.gravity
    )


class TestInitialization:
    def test_standing_references(self):
        scn = make_standing_scenario(T=8)
        state = initialize_references(scn)
        M = scn.model.total_mass
        # CoM centered between the feet at its initial height
        _, _, _, x_com = forward_kinematics(scn.model, scn.q0)
        assert np.allclose(state.h_bar[:, 0], 0.0)
        assert np.allclose(state.h_bar[:, 1], 0.0)
        assert np.allclose(state.h_bar[:, 2], x_com[2])
        assert np.allclose(state.h_bar[:, 3:], 0.0)
        # gravity split evenly: -Mg/2 per foot, summing to -Mg
        for t in range(scn.T):
            total = sum(state.lambda_bar[i][t] for i in range(len(scn.phases)))
            assert np.allclose(total, [0.0, 0.0, M * G], atol=1e-12)
            assert state.lambda_bar[0][t][2] == pytest.approx(M * G / 2)

    def test_single_contact_full_gravity(self):
        scn = one_foot_scenario()
        state = initialize_references(scn)
        M = scn.model.total_mass
        assert np.allclose(state.h_bar[:, :2], [0.0, 0.09])
        for t in range(scn.T):
            assert np.allclose(state.lambda_bar[0][t], [0, 0, M * G])

    def test_stepping_centroid_piecewise(self):
        scn = make_stepping_scenario(T=28, switch=7)
        state = initialize_references(scn)
        ys = state.h_bar[:, 1]
        # double support -> centered; right swing steps 7..13 -> over left foot
        assert np.allclose(ys[:7], 0.0)
        assert np.allclose(ys[7:14], 0.09)

    def test_swing_path_interpolates(self):
        scn = make_stepping_scenario(T=28, switch=7)
        state = initialize_references(scn, PlanOptions(swing_lift=0.03))
        path = state.c_bar["r_foot"]
        assert np.allclose(path[:7], [0.0, -0.09, 0.0])
        assert np.allclose(path[14:28], [0.1, -0.09, 0.0])
        # swing steps move monotonically forward and lift off the ground
        xs = path[7:14, 0]
        assert np.all(np.diff(np.concatenate([[0.0], xs, [0.1]])) > 0)
        assert path[7:14, 2].max() > 0.01

    def test_force_reference_is_never_updated(self):
        scn = make_standing_scenario(T=6)
        state0 = initialize_references(scn)
        _, _, _, report = plan(scn)
        final = report["state"].lambda_bar
        for i in state0.lambda_bar:
            assert np.array_equal(final[i], state0.lambda_bar[i])


class TestMismatchMetric:
    def test_zero_for_identical(self):
        h = np.random.default_rng(0).normal(size=(5, 9))
        assert momentum_mismatch(h, h.copy(), 30.0) == 0.0

    def test_momentum_rows_normalized_by_mass(self):
        h = np.zeros((2, 9))
        d = h.copy()
        d[0, 4] = 3.0  # linear momentum error of 3 kg m/s
        assert momentum_mismatch(h, d, 30.0) == pytest.approx(0.1)
        d2 = h.copy()
        d2[0, 1] = 0.05  # position error passes through unscaled
        assert momentum_mismatch(h, d2, 30.0) == pytest.approx(0.05)


class TestPlan:
    def test_standing_fixed_point(self):
        scn = make_standing_scenario(T=8)
        traj, h, forces, report = plan(scn)
        assert report["converged"]
        assert report["passes"] <= 2
        assert np.abs(traj.q - scn.q0).max() < 1e-3
        # near-zero momentum everywhere
        assert np.abs(h[:, 3:]).max() < 1e-2
        assert report["mismatch"][-1] < 1e-3

    def test_metric_non_increasing_at_the_end(self):
        scn = make_standing_scenario(T=8)
        _, _, _, report = plan(scn)
        hist = report["state"].metric_history
        if len(hist) >= 2:
            assert hist[-1] <= hist[-2]

    def test_returns_force_trajectories(self):
        scn = make_standing_scenario(T=6)
        _, h, forces, report = plan(scn)
        M = scn.model.total_mass
        for t in range(scn.T):
            total = sum(forces[i][t] for i in forces)
            assert np.allclose(total, [0, 0, M * G], atol=1e-3)

    def test_simultaneous_formulation(self):
        scn = make_standing_scenario(T=6)
        _, h_sim, _, rep = plan(scn, PlanOptions(formulation="simultaneous"))
        _, h_seq, _, _ = plan(scn)
        assert rep["momentum_status"][-1] == "Converged"
        assert np.abs(h_sim - h_seq).max() < 1e-3

    def test_options_validation(self):
        with pytest.raises(ValueError):
            PlanOptions(formulation="hybrid")
