"""Alternating momentum/kinematics planner.

One outer pass solves the kinematic tracking sub-problem against the
current momentum reference, re-extracts the achieved momentum profile,
then solves the momentum sub-problem against that profile. The exchanged
references (h_bar, c_bar) are exactly the sub-problem outputs; the force
reference lambda_bar keeps its initial even-gravity split throughout.
The loop stops when neither reference moved more than ``tol`` between
consecutive passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import rollout
from .kinematics import (
    KinematicRefs,
    KinematicWeights,
    effector_positions,
    forward_kinematics,
    momentum_state,
)
from .solver import SolverOptions, solve
from .transcription import build_sequential, build_simultaneous, extract_sequential, extract_simultaneous


class PlannerError(RuntimeError):
    def __init__(self, outer_pass, message):
        super().__init__(f"pass {outer_pass}: {message}")
        self.outer_pass = outer_pass


@dataclass
class PlanOptions:
    max_outer: int = 10
    tol: float = 1e-4  # reference-delta convergence threshold
    formulation: str = "sequential"  # "sequential" | "simultaneous"
    kinematic_weights: KinematicWeights = field(
        default_factory=lambda: KinematicWeights(
            posture=0.01, momentum=[20, 20, 20, 2, 2, 2, 2, 2, 2]
        )
    )
    kinematic_max_iter: int = 30
    swing_lift: float = 0.03

    def __post_init__(self):
        if self.formulation not in ("sequential", "simultaneous"):
            raise ValueError(f"unknown formulation {self.formulation!r}")


@dataclass
class PlanState:
    """References exchanged between the sub-problems plus pass history."""

    h_bar: np.ndarray  # (T+1, 9) momentum reference
    lambda_bar: dict  # phase index -> (T, 3) force reference (never updated)
    c_bar: dict  # effector name -> (T+1, 3) path reference
    q: np.ndarray  # current joint trajectory, (T+1, dof)
    forces: dict = None  # phase index -> (T, 3) momentum-plan forces
    kappas: dict = None  # phase index -> (T, 3) torques about the CoM
    outer: int = 0
    metric_history: list = field(default_factory=list)


def _support_centroid(scn, t):
    pts = [ph.location_world for ph in scn.phases if ph.active(min(t, scn.T - 1))]
    return np.mean(pts, axis=0)


def _effector_path(scn, name, lift):
    """Scheduled contact locations with interpolated swing segments."""
    phases = sorted(
        (ph for ph in scn.phases if ph.effector_id == name), key=lambda ph: ph.sigma
    )
    if not phases:  # effector never in contact: hold its initial position
        p0 = effector_positions(scn.model, scn.q0)[name]
        return np.tile(p0, (scn.T + 1, 1))
    path = np.zeros((scn.T + 1, 3))
    for ph in phases:
        path[ph.sigma : ph.epsilon] = ph.location_world
    path[scn.T] = phases[-1].location_world
    for a, b in zip(phases, phases[1:]):
        lo, hi = a.epsilon, b.sigma  # swing steps lo..hi-1
        if lo >= hi:
            continue
        for j, t in enumerate(range(lo, hi)):
            s = (j + 1) / (hi - lo + 1)
            path[t] = (1 - s) * a.location_world + s * b.location_world
            path[t, 2] += lift * np.sin(np.pi * s)
    return path


def initialize_references(scn, opts=None):
    """Zero-momentum references: CoM over the support centroid at its
    initial height, gravity split evenly across the active contacts."""
    opts = opts or PlanOptions()
    _, _, _, x_com = forward_kinematics(scn.model, scn.q0)
    M, g = scn.consts.M, scn.consts.g
    h_bar = np.zeros((scn.T + 1, 9))
    for t in range(scn.T + 1):
        c = _support_centroid(scn, t)
        h_bar[t, :3] = [c[0], c[1], x_com[2]]
    lambda_bar = {}
    n_active = np.array([len([ph for ph in scn.phases if ph.active(t)]) for t in range(scn.T)])
    for i, ph in enumerate(scn.phases):
        fr = np.zeros((scn.T, 3))
        for t in range(ph.sigma, ph.epsilon):
            fr[t] = -M * g / n_active[t]
        lambda_bar[i] = fr
    c_bar = {
        name: _effector_path(scn, name, opts.swing_lift) for name in scn.model.effectors
    }
    q = np.tile(scn.q0, (scn.T + 1, 1))
    return PlanState(h_bar, lambda_bar, c_bar, q)


def _kinematic_momentum(model, traj):
    qd = traj.qdot
    return np.array(
        [momentum_state(model, traj.q[t], qd[t]) for t in range(traj.q.shape[0])]
    )


def _solve_momentum(scn, state, opts):
    ms = scn.momentum_scenario(state.h_bar, state.lambda_bar)
    if opts.formulation == "sequential":
        p = build_sequential(ms)
        res = solve(p, scn.solver)
        sol = extract_sequential(p, res.x) if res.status != "NumericFailure" else None
    else:
        p = build_simultaneous(ms)
        res = solve(p, scn.solver)
        sol = extract_simultaneous(p, res.x) if res.status != "NumericFailure" else None
    return res, sol


def _check_dynamics_feasible(scn, sol, outer):
    """The momentum plan must be reproducible by integrating its forces."""
    from .contact import ContactWrenchCom
    from .dynamics import MomentumState

    wrenches = [
        [
            (ph, ContactWrenchCom(sol["forces"][i][t], sol["kappas"][i][t]))
            for i, ph in enumerate(scn.phases)
            if ph.active(t)
        ]
        for t in range(scn.T)
    ]
    h = rollout(
        MomentumState.from_vector(sol["h"][0]), wrenches, scn.delta, scn.T, scn.consts
    )
    err = max(np.abs(h[t].as_vector() - sol["h"][t]).max() for t in range(scn.T + 1))
    if err > 1e-8:
        raise PlannerError(outer, f"momentum plan violates its own dynamics by {err:.2e}")


def _com_torques(scn, sol):
    """kappa trajectories per phase from either formulation's solution."""
    if "kappas" in sol:
        return sol["kappas"]
    from .contact import cop_to_com

    kappas = {}
    for i, ph in enumerate(scn.phases):
        kappas[i] = np.zeros((scn.T, 3))
        for t in range(ph.sigma, ph.epsilon):
            w = sol["wrenches"][(i, t)]
            kappas[i][t] = cop_to_com(w, ph.surface, sol["h"][t, :3]).kappa
    return kappas


def momentum_mismatch(h_kin, h_dyn, M):
    """Normalized mismatch: positions in meters, momenta divided by the
    total mass so every component reads as a CoM-velocity-like quantity."""
    d = np.abs(h_kin - h_dyn)
    d[:, 3:] /= M
    return float(d.max())


def plan(scn, opts=None):
    """Alternate the kinematic and momentum sub-problems (kinematics first)
    until the exchanged references settle. Returns (joint trajectory,
    momentum trajectory, force trajectory, report)."""
    from .kinematics import solve_kinematic_subproblem

    opts = opts or PlanOptions()
    state = initialize_references(scn, opts)
    M = scn.consts.M
    report = {
        "passes": 0,
        "converged": False,
        "mismatch": [],
        "delta_h": [],
        "delta_c": [],
        "momentum_status": [],
        "com_y_range_init": float(np.ptp([
            forward_kinematics(scn.model, q)[3][1] for q in state.q
        ])),
    }
    traj = None
    h_dyn = None
    for outer in range(1, opts.max_outer + 1):
        state.outer = outer
        refs = KinematicRefs(
            h_ref=state.h_bar,
            effector_ref={k: v.copy() for k, v in state.c_bar.items()},
            posture_ref=scn.q0.copy(),
        )
        try:
            traj, _ = solve_kinematic_subproblem(
                scn.model, refs, scn.T, scn.delta, opts.kinematic_weights,
                scn.q0, max_iter=opts.kinematic_max_iter,
            )
        except Exception as e:  # propagate with the pass index attached
            raise PlannerError(outer, f"kinematic sub-problem failed: {e}")
        h_kin = _kinematic_momentum(scn.model, traj)
        c_new = {
            name: np.array([
                effector_positions(scn.model, traj.q[t])[name]
                for t in range(scn.T + 1)
            ])
            for name in scn.model.effectors
        }

        res, sol = _solve_momentum(
            scn, PlanState(h_kin, state.lambda_bar, c_new, traj.q), opts
        )
        report["momentum_status"].append(res.status)
        if res.status in ("NumericFailure", "Infeasible"):
            raise PlannerError(outer, f"momentum sub-problem failed: {res.status}")
        if opts.formulation == "sequential":
            _check_dynamics_feasible(scn, sol, outer)
        h_dyn = sol["h"]

        delta_h = float(np.abs(h_dyn - state.h_bar).max())
        delta_c = max(
            float(np.abs(c_new[name] - state.c_bar[name]).max())
            for name in state.c_bar
        )
        mism = momentum_mismatch(h_kin, h_dyn, M)
        report["mismatch"].append(mism)
        report["delta_h"].append(delta_h)
        report["delta_c"].append(delta_c)
        state.metric_history.append(max(delta_h, delta_c))
        state.h_bar = h_dyn
        state.c_bar = c_new
        state.q = traj.q
        state.forces = sol["forces"]
        state.kappas = _com_torques(scn, sol)
        report["passes"] = outer
        if max(delta_h, delta_c) <= opts.tol:
            report["converged"] = True
            break

    report["com_y_range_final"] = float(np.ptp(h_dyn[:, 1]))
    report["state"] = state
    return traj, h_dyn, state.forces, report
