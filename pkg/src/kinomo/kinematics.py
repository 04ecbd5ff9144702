"""Simplified rigid-body kinematics and the Gauss-Newton motion subproblem.

The model is a tree of single-DoF joints (prismatic or revolute); the
floating base is modelled as three prismatic joints along x, y, z
followed by three revolute joints (intrinsic x-y-z angles). Each joint
carries one link with a point mass / rotational inertia, so the total
centroidal momentum is a plain sum over links.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import BlockTridiagCholesky, NotPositiveDefinite

block_tridiag_cholesky = BlockTridiagCholesky  # re-exported factorization entry point


class LineSearchFailure(RuntimeError):
    pass


def _cross3(a, b):
    # np.cross carries large call overhead for single 3-vectors; this
    # function sits on the hottest kinematics path
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def _axis_rotation(axis, angle):
    axis = np.asarray(axis, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + s * K + (1 - c) * (K @ K)


@dataclass(frozen=True)
class Link:
    """One joint plus its attached body."""

    name: str
    parent: int  # index of parent link, -1 for world
    kind: str  # "revolute" | "prismatic"
    axis: np.ndarray
    offset: np.ndarray  # joint origin in the parent frame
    mass: float
    com: np.ndarray  # body CoM in the link frame
    inertia: np.ndarray  # 3x3 rotational inertia about the body CoM

    def __post_init__(self):
        object.__setattr__(self, "axis", np.asarray(self.axis, dtype=float))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))
        object.__setattr__(self, "com", np.asarray(self.com, dtype=float))
        object.__setattr__(self, "inertia", np.asarray(self.inertia, dtype=float))
        if self.kind not in ("revolute", "prismatic"):
            raise ValueError(f"unknown joint kind {self.kind!r}")
        if self.mass < 0:
            raise ValueError("link mass must be non-negative")


@dataclass(frozen=True)
class KinematicModel:
    links: tuple
    effectors: dict  # name -> (link index, local offset)
    lower: np.ndarray = None  # soft joint limits, NaN where unbounded
    upper: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        for i, ln in enumerate(self.links):
            if ln.parent >= i:
                raise ValueError("links must be topologically ordered (tree)")
        n = len(self.links)
        if self.lower is None:
            object.__setattr__(self, "lower", np.full(n, np.nan))
        if self.upper is None:
            object.__setattr__(self, "upper", np.full(n, np.nan))

    @property
    def dof(self):
        return len(self.links)

    @property
    def total_mass(self):
        return float(sum(ln.mass for ln in self.links))


@dataclass
class JointTrajectory:
    q: np.ndarray  # (T+1, n)
    delta: float
    converged: bool = True

    @property
    def qdot(self):
        qd = np.diff(self.q, axis=0) / self.delta
        return np.vstack([qd, qd[-1]])  # last step reuses the previous velocity


def forward_kinematics(model: KinematicModel, q):
    """World rotation/origin per link, link CoM positions and the total CoM."""
    q = np.asarray(q, dtype=float)
    n = model.dof
    if q.shape[0] != n:
        raise ValueError(f"expected {n} joint values")
    R = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    for i, ln in enumerate(model.links):
        Rp = np.eye(3) if ln.parent < 0 else R[ln.parent]
        pp = np.zeros(3) if ln.parent < 0 else p[ln.parent]
        if ln.kind == "revolute":
            R[i] = Rp @ _axis_rotation(ln.axis, q[i])
            p[i] = pp + Rp @ ln.offset
        else:
            R[i] = Rp
            p[i] = pp + Rp @ (ln.offset + ln.axis * q[i])
    masses = np.array([ln.mass for ln in model.links])
    coms = p + np.einsum("nij,nj->ni", R, np.array([ln.com for ln in model.links]))
    total = masses.sum()
    x_com = (masses[:, None] * coms).sum(axis=0) / total
    return R, p, coms, x_com


def effector_positions(model, q):
    R, p, _, _ = forward_kinematics(model, q)
    return {
        name: p[idx] + R[idx] @ off for name, (idx, off) in model.effectors.items()
    }


def _velocities(model, q, qdot, R, p):
    n = model.dof
    omega = np.zeros((n, 3))
    v = np.zeros((n, 3))
    for i, ln in enumerate(model.links):
        Rp = np.eye(3) if ln.parent < 0 else R[ln.parent]
        if ln.parent >= 0:
            op, vp, pp = omega[ln.parent], v[ln.parent], p[ln.parent]
        else:
            op, vp, pp = np.zeros(3), np.zeros(3), np.zeros(3)
        omega[i] = op
        v[i] = vp + _cross3(op, p[i] - pp)
        a_w = Rp @ ln.axis
        if ln.kind == "revolute":
            omega[i] = omega[i] + a_w * qdot[i]
        else:
            v[i] = v[i] + a_w * qdot[i]
    return omega, v


def centroidal_momentum(model, q, qdot, fk=None):
    """(l, k): linear momentum and angular momentum about the total CoM."""
    qdot = np.asarray(qdot, dtype=float)
    R, p, coms, x_com = fk if fk is not None else forward_kinematics(model, q)
    omega, v = _velocities(model, q, qdot, R, p)
    l = np.zeros(3)
    k = np.zeros(3)
    for i, ln in enumerate(model.links):
        if ln.mass == 0.0 and not np.any(ln.inertia):
            continue
        v_ci = v[i] + _cross3(omega[i], coms[i] - p[i])
        l += ln.mass * v_ci
        k += R[i] @ ln.inertia @ R[i].T @ omega[i]
        k += ln.mass * _cross3(coms[i] - x_com, v_ci)
    return l, k


def centroidal_momentum_matrix(model, q):
    """H(q) with (l, k) = H qdot, assembled by unit-velocity probing."""
    n = model.dof
    fk = forward_kinematics(model, q)
    H = np.zeros((6, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        l, k = centroidal_momentum(model, q, e, fk=fk)
        H[:3, j] = l
        H[3:, j] = k
        e[j] = 0.0
    return H


def momentum_state(model, q, qdot):
    """h = (x_com, l, k) matching the dynamics-side momentum state."""
    fk = forward_kinematics(model, q)
    l, k = centroidal_momentum(model, q, qdot, fk=fk)
    return np.concatenate([fk[3], l, k])


def momentum_jacobian(model, q, qdot, fd_step=1e-6):
    """(d h/d q, d h/d qdot); velocities enter linearly so that block is
    exact, the configuration block uses central finite differences."""
    n = model.dof
    H = centroidal_momentum_matrix(model, q)
    dq_dot = np.vstack([np.zeros((3, n)), H])
    dq = np.zeros((9, n))
    for j in range(n):
        qp, qm = q.copy(), q.copy()
        qp[j] += fd_step
        qm[j] -= fd_step
        dq[:, j] = (momentum_state(model, qp, qdot) - momentum_state(model, qm, qdot)) / (
            2 * fd_step
        )
    return dq, dq_dot


def point_jacobian(model, q, link_index, local_offset, fk=None):
    """Geometric Jacobian of a point attached to a link (3 x n, exact)."""
    R, p, _, _ = fk if fk is not None else forward_kinematics(model, q)
    x = p[link_index] + R[link_index] @ local_offset
    J = np.zeros((3, model.dof))
    i = link_index
    while i >= 0:
        ln = model.links[i]
        Rp = np.eye(3) if ln.parent < 0 else R[ln.parent]
        a_w = Rp @ ln.axis
        if ln.kind == "revolute":
            J[:, i] = _cross3(a_w, x - p[i])
        else:
            J[:, i] = a_w
        i = ln.parent
    return J


# ---------------------------------------------------------------------------
# Default desk-scale biped


def default_biped(total_mass=30.0):
    """Small biped: floating base, 3-DoF legs (pitch-roll-knee) and 2-DoF
    arms (shoulder/elbow pitch). Feet are point effectors on the shanks."""
    X, Y, Z = np.eye(3)
    zero3 = np.zeros(3)

    def inert(m, r):
        return (2.0 / 5.0) * m * r * r * np.eye(3)

    links = []
    # floating base: 3 prismatic + 3 revolute virtual joints, massless
    # except the last which carries the torso body.
    for name, axis in (("base_x", X), ("base_y", Y), ("base_z", Z)):
        links.append(Link(name, len(links) - 1, "prismatic", axis, zero3, 0.0, zero3, np.zeros((3, 3))))
    for name, axis in (("base_rx", X), ("base_ry", Y)):
        links.append(Link(name, len(links) - 1, "revolute", axis, zero3, 0.0, zero3, np.zeros((3, 3))))
    torso_mass = 16.0
    links.append(
        Link("base_rz", len(links) - 1, "revolute", Z, zero3, torso_mass,
             np.array([0.0, 0.0, 0.1]), inert(torso_mass, 0.18))
    )
    base = len(links) - 1
    effectors = {}
    for side, sy in (("l", 1.0), ("r", -1.0)):
        hip = np.array([0.0, sy * 0.09, -0.05])
        links.append(Link(f"{side}_hip_pitch", base, "revolute", Y, hip, 0.0, zero3, np.zeros((3, 3))))
        links.append(
            Link(f"{side}_hip_roll", len(links) - 1, "revolute", X, zero3, 2.0,
                 np.array([0.0, 0.0, -0.125]), inert(2.0, 0.06))
        )
        links.append(
            Link(f"{side}_knee", len(links) - 1, "revolute", Y, np.array([0.0, 0.0, -0.25]), 1.5,
                 np.array([0.0, 0.0, -0.125]), inert(1.5, 0.05))
        )
        effectors[f"{side}_foot"] = (len(links) - 1, np.array([0.0, 0.0, -0.25]))
        shoulder = np.array([0.0, sy * 0.15, 0.15])
        links.append(
            Link(f"{side}_shoulder", base, "revolute", Y, shoulder, 1.0,
                 np.array([0.0, 0.0, -0.1]), inert(1.0, 0.04))
        )
        links.append(
            Link(f"{side}_elbow", len(links) - 1, "revolute", Y, np.array([0.0, 0.0, -0.2]), 0.75,
                 np.array([0.0, 0.0, -0.1]), inert(0.75, 0.035))
        )
    scale = total_mass / sum(ln.mass for ln in links)
    links = [
        Link(ln.name, ln.parent, ln.kind, ln.axis, ln.offset,
             ln.mass * scale, ln.com, ln.inertia * scale)
        for ln in links
    ]
    n = len(links)
    lower = np.full(n, np.nan)
    upper = np.full(n, np.nan)
    lower[6:] = -2.5
    upper[6:] = 2.5
    lower[3:5] = -1.3  # keep base roll/pitch in a sane range
    upper[3:5] = 1.3
    return KinematicModel(tuple(links), effectors, lower, upper)


def biped_standing_configuration(model=None, knee=0.3, base_height=None):
    """Configuration with both feet flat under the hips at z = 0."""
    model = model if model is not None else default_biped()
    q = np.zeros(model.dof)
    names = [ln.name for ln in model.links]
    if base_height is None:
        base_height = 0.05 + 0.5 * np.cos(knee)  # hip drop + two 0.25 segments
    q[names.index("base_z")] = base_height
    for side in ("l", "r"):
        q[names.index(f"{side}_hip_pitch")] = knee
        q[names.index(f"{side}_knee")] = -2 * knee
    return q


# ---------------------------------------------------------------------------
# Gauss-Newton kinematic subproblem


@dataclass
class KinematicWeights:
    posture: float = 0.05
    momentum: np.ndarray = field(default_factory=lambda: np.ones(9))
    effector: float = 10.0
    joint_limit: float = 10.0

    def __post_init__(self):
        self.momentum = np.broadcast_to(
            np.asarray(self.momentum, dtype=float), (9,)
        ).copy()


@dataclass
class KinematicRefs:
    h_ref: np.ndarray  # (T+1, 9)
    effector_ref: dict  # name -> (T+1, 3)
    posture_ref: np.ndarray  # (n,) or (T+1, n)


def _limit_residual(model, q, w):
    lo, hi = model.lower, model.upper
    r = np.zeros_like(q)
    with np.errstate(invalid="ignore"):
        below = q < lo
        above = q > hi
    r[below] = (q - lo)[below]
    r[above] = (q - hi)[above]
    return np.sqrt(w) * r


def _step_residual_and_jac(model, q_t, q_next, delta, h_ref_t, eff_ref_t, post_t, weights, with_jac=True):
    """Residual r(q_t, q_next) for one step and its two Jacobian blocks."""
    n = model.dof
    qdot = (q_next - q_t) / delta
    fk = forward_kinematics(model, q_t)
    l, k = centroidal_momentum(model, q_t, qdot, fk=fk)
    h = np.concatenate([fk[3], l, k])
    wm = np.sqrt(weights.momentum)
    res = [wm * (h - h_ref_t)]
    rows_eff = []
    for name, target in eff_ref_t.items():
        idx, off = model.effectors[name]
        x = fk[1][idx] + fk[0][idx] @ off
        res.append(np.sqrt(weights.effector) * (x - target))
        rows_eff.append((idx, off))
    res.append(np.sqrt(weights.posture) * (q_t - post_t))
    res.append(_limit_residual(model, q_t, weights.joint_limit))
    r = np.concatenate(res)
    if not with_jac:
        return r, None, None
    dq, dqd = momentum_jacobian(model, q_t, qdot)
    Jt = [wm[:, None] * (dq - dqd / delta)]
    Jn = [wm[:, None] * (dqd / delta)]
    for idx, off in rows_eff:
        Jp = np.sqrt(weights.effector) * point_jacobian(model, q_t, idx, off, fk=fk)
        Jt.append(Jp)
        Jn.append(np.zeros((3, n)))
    Jt.append(np.sqrt(weights.posture) * np.eye(n))
    Jn.append(np.zeros((n, n)))
    lim = np.zeros(n)
    with np.errstate(invalid="ignore"):
        lim[(q_t < model.lower) | (q_t > model.upper)] = 1.0
    Jt.append(np.sqrt(weights.joint_limit) * np.diag(lim))
    Jn.append(np.zeros((n, n)))
    return r, np.vstack(Jt), np.vstack(Jn)


def _trajectory_cost(model, q, delta, refs, weights):
    T = q.shape[0] - 1
    cost = 0.0
    for t in range(T + 1):
        # at t = T the velocity reuses the last finite difference
        qa = q[t] if t < T else q[T]
        qb = q[t + 1] if t < T else 2 * q[T] - q[T - 1]
        r, _, _ = _step_residual_and_jac(
            model, qa, qb, delta,
            refs.h_ref[t], {k: v[t] for k, v in refs.effector_ref.items()},
            refs.posture_ref[t], weights, with_jac=False,
        )
        cost += 0.5 * float(r @ r)
    return cost


def solve_kinematic_subproblem(
    model,
    refs: KinematicRefs,
    T,
    delta,
    weights: KinematicWeights,
    q0,
    max_iter=30,
    step_tol=1e-6,
    cost_tol=1e-9,
):
    """Minimize posture/momentum/effector tracking over q_{1:T} by
    Gauss-Newton with a block tridiagonal normal-equation factorization."""
    n = model.dof
    q = np.tile(np.asarray(q0, dtype=float), (T + 1, 1))
    post = refs.posture_ref
    if post.ndim == 1:
        post = np.tile(post, (T + 1, 1))
    refs = KinematicRefs(refs.h_ref, refs.effector_ref, post)
    cost = _trajectory_cost(model, q, delta, refs, weights)
    converged = True
    damping = 0.0
    for _ in range(max_iter):
        diag = [np.zeros((n, n)) for _ in range(T)]
        off = [np.zeros((n, n)) for _ in range(T - 1)]
        grad = np.zeros(T * n)
        for t in range(T + 1):
            if t < T:
                qa, qb = q[t], q[t + 1]
            else:
                qa, qb = q[T], 2 * q[T] - q[T - 1]
            r, Jt, Jn = _step_residual_and_jac(
                model, qa, qb, delta,
                refs.h_ref[t], {k: v[t] for k, v in refs.effector_ref.items()},
                refs.posture_ref[t], weights,
            )
            if t == T:
                # q_T enters both arguments: the extrapolated q_{T+1} is 2 q_T - q_{T-1}
                Ja = Jt + 2 * Jn
                if T >= 2:
                    blocks = [(T - 2, -Jn), (T - 1, Ja)]
                else:
                    blocks = [(T - 1, Ja - Jn)]
            elif t == 0:
                blocks = [(0, Jn)]  # q_0 is fixed
            else:
                blocks = [(t - 1, Jt), (t, Jn)]
            for bi, Ji in blocks:
                grad[bi * n : (bi + 1) * n] += Ji.T @ r
                diag[bi] += Ji.T @ Ji
            for (bi, Ji), (bj, Jj) in zip(blocks, blocks[1:]):
                # consecutive decision blocks (bj = bi + 1 by construction)
                lo, hi = (bi, bj) if bi < bj else (bj, bi)
                Jlo = Ji if bi < bj else Jj
                Jhi = Jj if bi < bj else Ji
                off[lo] += Jhi.T @ Jlo
        step = None
        while step is None:
            try:
                fac = BlockTridiagCholesky(
                    [D + (1e-10 + damping) * np.eye(n) for D in diag], off
                )
                step = -fac.solve(grad)
            except NotPositiveDefinite:
                damping = max(1e-6, damping * 10)
                if damping > 1e6:
                    raise
        alpha = 1.0
        improved = False
        gTs = float(grad @ step)
        for _ in range(25):
            q_new = q.copy()
            q_new[1:] = q[1:] + alpha * step.reshape(T, n)
            new_cost = _trajectory_cost(model, q_new, delta, refs, weights)
            if new_cost <= cost + 1e-4 * alpha * gTs or new_cost < cost:
                improved = True
                break
            alpha *= 0.5
        if not improved:
            converged = False
            break
        moved = alpha * np.abs(step).max()
        decreased = cost - new_cost
        q, cost = q_new, new_cost
        damping *= 0.25
        if moved <= step_tol or decreased <= cost_tol:
            break
    return JointTrajectory(q, delta, converged=converged), cost
