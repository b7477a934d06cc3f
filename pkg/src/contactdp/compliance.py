"""Closed-form compliance math: adaptive stiffness, virtual targets, augmented actions.

All functions here are pure and operate on small numpy arrays; they are safe
to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigurationError",
    "Wrench",
    "StiffnessParams",
    "CompliancePriors",
    "Pose",
    "wrap_angle",
    "adaptive_stiffness",
    "build_stiffness_matrix",
    "virtual_target",
    "augment_action",
    "force_to_action_frame",
]


class ConfigurationError(ValueError):
    """Raised for inconsistent parameter sets."""


def wrap_angle(theta):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    return -(np.remainder(-np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi)


@dataclass(frozen=True)
class Wrench:
    """External wrench: planar force vector plus an optional scalar torque."""

    force: np.ndarray
    torque: float | None = None

    def __post_init__(self):
        f = np.asarray(self.force, dtype=float)
        if not np.all(np.isfinite(f)):
            raise ValueError("wrench force must be finite")
        if self.torque is not None and not math.isfinite(self.torque):
            raise ValueError("wrench torque must be finite")
        object.__setattr__(self, "force", f)

    def magnitude(self) -> float:
        return float(np.linalg.norm(self.force))


@dataclass(frozen=True)
class StiffnessParams:
    """Parameters of the force-dependent stiffness ramp.

    Between ``f_min`` and ``f_max`` the stiffness along the force direction
    drops linearly from ``k_max`` to ``k_min``; directions orthogonal to the
    force keep the constant ``k_high``.
    """

    k_max: float = 1000.0
    k_min: float = 50.0
    f_min: float = 2.0
    f_max: float = 10.0
    k_high: float = 1000.0
    # below this force magnitude no direction is defined and K falls back to k_max * I
    direction_eps: float = 0.1

    def __post_init__(self):
        if not (self.k_max >= self.k_high >= self.k_min > 0.0):
            raise ConfigurationError(
                f"need k_max >= k_high >= k_min > 0, got "
                f"k_max={self.k_max}, k_high={self.k_high}, k_min={self.k_min}"
            )
        if not (self.f_max > self.f_min >= 0.0):
            raise ConfigurationError(
                f"need f_max > f_min >= 0, got f_max={self.f_max}, f_min={self.f_min}"
            )

    def to_dict(self) -> dict:
        return {
            "k_max": self.k_max,
            "k_min": self.k_min,
            "f_min": self.f_min,
            "f_max": self.f_max,
            "k_high": self.k_high,
            "direction_eps": self.direction_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StiffnessParams":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class CompliancePriors:
    """Inertia/damping matrices of the full compliance model.

    Carried for documentation only; the quasi-static virtual-target math
    ignores them.
    """

    inertia: np.ndarray | None = None
    damping: np.ndarray | None = None

    def __post_init__(self):
        for name in ("inertia", "damping"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m, dtype=float)
            if not np.allclose(m, m.T):
                raise ValueError(f"{name} matrix must be symmetric")
            if np.any(np.linalg.eigvalsh(m) < -1e-12):
                raise ValueError(f"{name} matrix must be positive semi-definite")
            object.__setattr__(self, name, m)


@dataclass
class Pose:
    """Planar pose: 2-D position plus one rotation angle, wrapped to (-pi, pi]."""

    position: np.ndarray
    angle: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float)
        if p.shape != (2,) or not np.all(np.isfinite(p)):
            raise ValueError("position must be a finite 2-vector")
        self.position = p
        if not math.isfinite(self.angle):
            raise ValueError("angle must be finite")
        self.angle = float(wrap_angle(self.angle))

    def as_array(self) -> np.ndarray:
        return np.array([self.position[0], self.position[1], self.angle], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Pose":
        a = np.asarray(a, dtype=float)
        return cls(position=a[:2].copy(), angle=float(a[2]))


def adaptive_stiffness(force_magnitude, params: StiffnessParams):
    """Stiffness along the force direction as a function of force magnitude.

    Piecewise linear: ``k_max`` below ``f_min``, ``k_min`` above ``f_max``,
    linear ramp in between. Accepts a scalar or an array and returns the
    matching type.
    """
    f = np.asarray(force_magnitude, dtype=float)
    if np.any(f < 0):
        raise ValueError("force magnitude must be non-negative")
    slope = (params.k_max - params.k_min) / (params.f_max - params.f_min)
    k = params.k_max - slope * np.clip(f - params.f_min, 0.0, params.f_max - params.f_min)
    if np.isscalar(force_magnitude) or np.ndim(force_magnitude) == 0:
        return float(k)
    return k


def build_stiffness_matrix(f_ext: Wrench | np.ndarray, params: StiffnessParams) -> np.ndarray:
    """Translational stiffness matrix: adaptive along the force direction,
    ``k_high`` in the orthogonal subspace, ``k_max * I`` when the direction is
    undefined (near-zero force)."""
    f = f_ext.force if isinstance(f_ext, Wrench) else np.asarray(f_ext, dtype=float)
    d = f.shape[0]
    mag = float(np.linalg.norm(f))
    if mag <= params.direction_eps:
        return params.k_max * np.eye(d)
    u = f / mag
    k_adp = adaptive_stiffness(mag, params)
    outer = np.outer(u, u)
    return k_adp * outer + params.k_high * (np.eye(d) - outer)


def virtual_target(
    x_real: Pose,
    f_ext: Wrench,
    stiffness: np.ndarray,
    rotational_stiffness: float | None = None,
) -> Pose:
    """Pose a compliant system would command to realize ``f_ext`` at the
    given stiffness: position offset ``K^-1 f``; the rotation only moves when
    a rotational stiffness is supplied and the wrench carries a torque."""
    offset = np.linalg.solve(stiffness, f_ext.force)
    angle = x_real.angle
    if rotational_stiffness is not None and f_ext.torque is not None:
        angle = float(wrap_angle(angle + f_ext.torque / rotational_stiffness))
    return Pose(position=x_real.position + offset, angle=angle)


def force_to_action_frame(f_ext: Wrench, rotation: float | None = None) -> Wrench:
    """Express a sensed wrench in the action frame.

    The simulator reports forces in the world frame already, so the default
    transform is the identity; a rotation angle is accepted for setups where
    the sensor frame differs.
    """
    if rotation is None or rotation == 0.0:
        return f_ext
    c, s = math.cos(rotation), math.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    return Wrench(force=rot @ f_ext.force, torque=f_ext.torque)


def augment_action(
    action: np.ndarray,
    x_real: Pose,
    f_ext: Wrench,
    params: StiffnessParams,
    rotational_stiffness: float | None = None,
) -> np.ndarray:
    """Concatenate an action with its virtual target and adaptive stiffness.

    Output layout: ``[action, vt_x, vt_y, vt_angle, k_adp]``.
    """
    f_ext = force_to_action_frame(f_ext)
    k_adp = adaptive_stiffness(f_ext.magnitude(), params)
    stiffness = build_stiffness_matrix(f_ext, params)
    vt = virtual_target(x_real, f_ext, stiffness, rotational_stiffness)
    return np.concatenate([np.asarray(action, dtype=float), vt.as_array(), [k_adp]])
