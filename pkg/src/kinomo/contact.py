"""Contact surfaces, phases, wrench representations and contact constraints.

A contact wrench can be written in local surface coordinates as a force,
a center of pressure and a normal torque (the representation in which
friction/support constraints are affine), or as a force and torque about
the robot's center of mass (the representation in which the momentum
dynamics are affine but the support constraints become Q+/- quadratics).
Both directions of the conversion and both constraint families live here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qpm

# Smallest normal force (N) for which the CoP representation is defined;
# below this the 2x2 projector inverse blows up.
NORMAL_FORCE_EPS = 1e-9

_ROT_TOL = 1e-10

# 2x2 rotation by +90 degrees; inverse of the premultiplied CoP projector
# up to the 1/(R_z^T f) scale.
_J90 = np.array([[0.0, 1.0], [-1.0, 0.0]])


class NormalForceNonPositive(ValueError):
    """Raised when converting to CoP coordinates without positive normal force."""


@dataclass(frozen=True)
class ContactSurface:
    """Planar contact surface with friction and support limits.

    R columns are the surface tangent (x, y) and normal (z) axes in world
    frame; t is the surface origin. p_max holds the rectangular support
    half-extents and tau_max bounds the torque about the surface normal.
    """

    R: np.ndarray
    t: np.ndarray
    mu: float
    p_max: np.ndarray
    tau_max: float

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))
        object.__setattr__(self, "p_max", np.asarray(self.p_max, dtype=float))
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-8:
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-8:
            raise ValueError("R is not a proper rotation")
        if not self.mu > 0:
            raise ValueError("friction coefficient must be positive")
        if np.any(self.p_max < 0) or self.tau_max < 0:
            raise ValueError("support limits must be non-negative")

    @property
    def R_xy(self):
        return self.R[:, :2]

    @property
    def R_z(self):
        return self.R[:, 2]


@dataclass(frozen=True)
class ContactPhase:
    """Timed contact of one effector on a surface over steps [sigma, epsilon)."""

    effector_id: str
    sigma: int
    epsilon: int
    surface: ContactSurface
    c_hat: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "c_hat", np.asarray(self.c_hat, dtype=float))
        if not 0 <= self.sigma < self.epsilon:
            raise ValueError("phase must satisfy 0 <= sigma < epsilon")

    def active(self, t):
        return self.sigma <= t < self.epsilon

    @property
    def location_world(self):
        s = self.surface
        return s.R_xy @ self.c_hat + s.t


@dataclass(frozen=True)
class ContactWrenchCop:
    """Wrench in surface coordinates: force, center of pressure, normal torque."""

    f_hat: np.ndarray
    p_hat: np.ndarray
    tau_hat: float

    def __post_init__(self):
        object.__setattr__(self, "f_hat", np.asarray(self.f_hat, dtype=float))
        object.__setattr__(self, "p_hat", np.asarray(self.p_hat, dtype=float))


@dataclass(frozen=True)
class ContactWrenchCom:
    """World-frame force and torque taken about the center of mass."""

    f: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float))
        object.__setattr__(self, "kappa", np.asarray(self.kappa, dtype=float))


def local_to_world(w: ContactWrenchCop, s: ContactSurface):
    """World force, torque and point of action of a local wrench."""
    f = s.R @ w.f_hat
    tau = s.R_z * w.tau_hat
    p = s.R_xy @ w.p_hat + s.t
    return f, tau, p


def world_to_local(f, tau, p, s: ContactSurface):
    return ContactWrenchCop(s.R.T @ f, s.R_xy.T @ (p - s.t), float(s.R_z @ tau))


def cop_to_com(w: ContactWrenchCop, s: ContactSurface, r):
    """Re-express a CoP wrench as force/torque about the CoM at r."""
    f, tau, p = local_to_world(w, s)
    kappa = tau + np.cross(p - np.asarray(r, dtype=float), f)
    return ContactWrenchCom(f, kappa)


def com_to_cop(w: ContactWrenchCom, s: ContactSurface, r, eps=NORMAL_FORCE_EPS):
    """Invert cop_to_com; requires strictly positive normal force.

    The tangential torque at the CoP vanishes, so the 2d CoP solves
    0 = R_xy^T kappa + R_xy^T((r - t) x f) + (R_z^T f) [[0,-1],[1,0]] p_hat,
    inverted analytically via the 2x2 projector.
    """
    r = np.asarray(r, dtype=float)
    fz = float(s.R_z @ w.f)
    if not fz > eps:
        raise NormalForceNonPositive(f"normal force {fz} <= {eps}")
    m = s.R_xy.T @ (w.kappa + np.cross(r - s.t, w.f))
    p_hat = -(_J90 @ m) / fz
    # remaining torque is purely along the surface normal
    f_local = s.R.T @ w.f
    tau_full = s.R.T @ w.kappa + np.cross(
        s.R.T @ (r - s.t) - np.array([p_hat[0], p_hat[1], 0.0]), f_local
    )
    return ContactWrenchCop(f_local, p_hat, float(tau_full[2]))


def build_affine_contact_constraints(phase: ContactPhase):
    """Affine inequality rows g(x) >= 0 over x = (f_hat, p_hat, tau_hat).

    Encodes the normal-torque bound, the rectangular support bound on the
    CoP and the friction pyramid; ten scalar rows in total.
    """
    s = phase.surface
    mu = s.mu
    cx, cy = phase.c_hat
    pmx, pmy = s.p_max
    # x = (f_hat_x, f_hat_y, f_hat_z, p_hat_x, p_hat_y, tau_hat)
    A = np.array(
        [
            [0, 0, 0, 0, 0, -1.0],  # tau_max - tau >= 0
            [0, 0, 0, 0, 0, 1.0],   # tau + tau_max >= 0
            [0, 0, 0, -1.0, 0, 0],  # pm_x - (p_x - c_x) >= 0
            [0, 0, 0, 1.0, 0, 0],   # (p_x - c_x) + pm_x >= 0
            [0, 0, 0, 0, -1.0, 0],
            [0, 0, 0, 0, 1.0, 0],
            [-1.0, 0, mu, 0, 0, 0],  # mu f_z - f_x >= 0
            [1.0, 0, mu, 0, 0, 0],   # f_x + mu f_z >= 0
            [0, -1.0, mu, 0, 0, 0],
            [0, 1.0, mu, 0, 0, 0],
        ]
    )
    a = np.array(
        [
            s.tau_max,
            s.tau_max,
            pmx + cx,
            pmx - cx,
            pmy + cy,
            pmy - cy,
            0.0,
            0.0,
            0.0,
            0.0,
        ]
    )
    return qpm.make_affine(A, a)


def build_cop_qpm_constraints(phase: ContactPhase, r_map, f_map, kappa_map):
    """Support-rectangle constraints as Q+/- rows over the CoM representation.

    r_map, f_map and kappa_map are affine functions of a shared decision
    vector giving the CoM position, world contact force and CoM torque.
    The four rows, multiplied through by the (positive) normal force, are

        (p_max +/- c_hat) R_z^T f +/- [[0,1],[-1,0]] m >= 0,
        m = R_xy^T kappa + R_xy^T ((r - t) x f),

    and carry the cross-product Q/P matrices through affine composition
    only (no eigendecomposition at build time).
    """
    for name, fn in (("r_map", r_map), ("f_map", f_map), ("kappa_map", kappa_map)):
        if not fn.is_affine():
            raise ValueError(f"{name} must be affine")
    s = phase.surface
    n = f_map.input_dim
    # (r - t, f) feeding the cross product
    shift = qpm.make_affine(np.zeros((3, n)), -s.t)
    rt = qpm.linear_combine([(1.0, r_map), (1.0, shift)])
    cross = qpm.compose_affine(qpm.cross_product_qpm(), qpm.stack([rt, f_map]))
    m = qpm.linear_combine(
        [
            (1.0, qpm.affine_after(s.R_xy.T, np.zeros(2), kappa_map)),
            (1.0, qpm.affine_after(s.R_xy.T, np.zeros(2), cross)),
        ]
    )
    fz = qpm.affine_after(s.R_z.reshape(1, 3), np.zeros(1), f_map)
    m_x = qpm.select_rows(m, [0])
    m_y = qpm.select_rows(m, [1])
    pmx, pmy = s.p_max
    cx, cy = phase.c_hat
    rows = [
        qpm.linear_combine([(pmx + cx, fz), (1.0, m_y)]),   # upper x
        qpm.linear_combine([(pmy + cy, fz), (-1.0, m_x)]),  # upper y
        qpm.linear_combine([(pmx - cx, fz), (-1.0, m_y)]),  # lower x
        qpm.linear_combine([(pmy - cy, fz), (1.0, m_x)]),   # lower y
    ]
    return qpm.stack(rows)


def cop_wrench_feasibility(phase: ContactPhase, w: ContactWrenchCop, tol=0.0):
    """Per-family slack values (>= -tol means satisfied) for a CoP wrench."""
    g = build_affine_contact_constraints(phase)
    x = np.concatenate([w.f_hat, w.p_hat, [w.tau_hat]])
    vals = g(x)
    return {
        "torque": float(vals[:2].min()),
        "cop": float(vals[2:6].min()),
        "friction": float(vals[6:].min()),
        "feasible": bool(vals.min() >= -tol),
    }
