"""Planar quasi-static contact world.

A point tool moves in an (x, y) workspace above a horizontal springy surface
whose height offset and stiffness are hidden from the slow observation; the
measured contact force is the only way to resolve them. Two tasks:

* ``push_hold`` — reach a lateral target, press to a target normal force and
  keep it inside a band for a number of consecutive steps without ever
  exceeding the force limit.
* ``threshold_trigger`` — press at the target location until a hidden trigger
  force latches, then retract clear of the surface.

The tool pose is exactly the commanded pose (quasi-static spring world):
contact never blocks motion, it only produces force, so the slow observation
stream is identical across hidden-parameter draws by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .compliance import Pose, Wrench, wrap_angle

TASK_KINDS = ("push_hold", "threshold_trigger")

PHASE_FREE = "free"
PHASE_CONTACT = "contact"
PHASE_HOLDING = "holding"
PHASE_TRIGGERED = "triggered"
PHASE_SUCCESS = "success"
PHASE_FAILURE = "failure"

FAIL_EXCESSIVE_FORCE = "excessive force"
FAIL_NO_CONTACT = "no contact"
FAIL_NO_STABLE_HOLD = "no stable hold"
FAIL_PREMATURE_RELEASE = "premature release"
FAIL_WRONG_LOCATION = "wrong location"
FAIL_NO_RETRACTION = "no retraction"
FAIL_TIMEOUT = "timeout"
FAIL_SAFETY_STOP = "safety stop"


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "push_hold"
    force_target: float = 8.0
    force_limit: float = 14.0
    hold_steps: int = 10
    hold_band: float = 2.0
    trigger_force: float = 9.0
    location_tol: float = 0.015
    retract_clearance: float = 0.01
    max_steps: int = 150
    # hidden randomization ranges
    surface_offset_range: tuple[float, float] = (-0.01, 0.01)
    env_stiffness_range: tuple[float, float] = (1000.0, 4000.0)
    trigger_force_range: tuple[float, float] = (6.0, 12.0)
    # visible geometry
    nominal_surface_y: float = 0.10
    target_x: float = 0.25
    start_x_range: tuple[float, float] = (0.04, 0.10)
    start_y_range: tuple[float, float] = (0.18, 0.22)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not (self.force_limit > self.force_target > 0):
            raise ValueError("need force_limit > force_target > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, val in d.items():
            if isinstance(val, tuple):
                d[key] = list(val)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        for key in (
            "surface_offset_range",
            "env_stiffness_range",
            "trigger_force_range",
            "start_x_range",
            "start_y_range",
        ):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ContactState:
    """Ground-truth simulator state; hidden fields never reach the slow obs."""

    tool_pose: Pose
    surface_offset: float
    env_stiffness: float
    trigger_force_true: float
    contact_force: Wrench           # measured (noisy) wrench
    true_normal_force: float
    task_phase: str
    step_count: int = 0
    hold_counter: int = 0
    triggered: bool = False
    contacted_ever: bool = False
    peak_force: float = 0.0
    peak_force_at_target: float = 0.0
    limit_breached: bool = False
    out_of_workspace: bool = False
    failure_reason: str | None = None


# workspace box; the tool pose is clamped to it
WORKSPACE_X = (0.0, 0.4)
WORKSPACE_Y = (0.0, 0.3)
ACTUATOR_MAX_TRANSLATION = 0.02   # m per control step
ACTUATOR_MAX_ROTATION = 0.2      # rad per control step


class PlanarContactSim:
    """Single-threaded simulator instance; run several in parallel if needed."""

    def __init__(
        self,
        task: TaskSpec,
        noise_sigma: float = 0.2,
        friction_mu: float = 0.3,
        control_rate_hz: float = 10.0,
    ):
        self.task = task
        self.noise_sigma = noise_sigma
        self.friction_mu = friction_mu
        self.control_rate_hz = control_rate_hz
        self.state: ContactState | None = None
        self._rng: np.random.Generator | None = None

    # -- lifecycle ----------------------------------------------------------

    def reset(self, seed: int) -> dict:
        self._rng = np.random.default_rng(seed)
        r = self._rng
        offset = r.uniform(*self.task.surface_offset_range)
        stiffness = r.uniform(*self.task.env_stiffness_range)
        trigger = r.uniform(*self.task.trigger_force_range)
        start = Pose(
            position=np.array(
                [r.uniform(*self.task.start_x_range), r.uniform(*self.task.start_y_range)]
            ),
            angle=0.0,
        )
        self.state = ContactState(
            tool_pose=start,
            surface_offset=offset,
            env_stiffness=stiffness,
            trigger_force_true=trigger,
            contact_force=Wrench(force=np.zeros(2)),
            true_normal_force=0.0,
            task_phase=PHASE_FREE,
        )
        self._measure(dx=0.0)
        return self._observe()

    @property
    def surface_y(self) -> float:
        return self.task.nominal_surface_y + self.state.surface_offset

    def _penetration(self) -> float:
        return max(0.0, self.surface_y - self.state.tool_pose.position[1])

    def _measure(self, dx: float) -> None:
        """Recompute true and measured contact force at the current pose."""
        s = self.state
        p = self._penetration()
        f_normal = s.env_stiffness * p
        f_tangent = 0.0
        if p > 0.0 and abs(dx) > 1e-9:
            f_tangent = -self.friction_mu * f_normal * math.copysign(1.0, dx)
        noise = self._rng.normal(0.0, self.noise_sigma, size=2)
        measured = np.array([f_tangent, f_normal]) + noise
        s.true_normal_force = f_normal
        s.contact_force = Wrench(force=measured)

    def _observe(self) -> dict:
        s = self.state
        return {
            "slow": self.slow_frame(),
            "proprio": s.tool_pose.as_array(),
            "force": s.contact_force.force.copy(),
            "phase": s.task_phase,
        }

    def slow_frame(self) -> np.ndarray:
        """Visual scene features: coarse surface estimate and target location.

        The estimate is the nominal height quantized to the 1 cm grid, so the
        hidden offset (up to +-1 cm) and the stiffness never leak into it.
        """
        est = round(self.task.nominal_surface_y / 0.01) * 0.01
        return np.array([est, self.task.target_x])

    # -- stepping -----------------------------------------------------------

    def step(self, action: np.ndarray) -> tuple[dict, np.ndarray, bool, dict]:
        """Apply a relative pose delta; returns (obs, measured force, done, info)."""
        if self.state is None:
            raise RuntimeError("call reset() first")
        s = self.state
        if s.task_phase in (PHASE_SUCCESS, PHASE_FAILURE):
            raise RuntimeError("episode already finished")

        action = np.asarray(action, dtype=float)
        clamped = False
        dxy = np.clip(action[:2], -ACTUATOR_MAX_TRANSLATION, ACTUATOR_MAX_TRANSLATION)
        dth = float(np.clip(action[2], -ACTUATOR_MAX_ROTATION, ACTUATOR_MAX_ROTATION))
        if not np.allclose(dxy, action[:2]) or dth != action[2]:
            clamped = True

        pos = s.tool_pose.position + dxy
        lo = np.array([WORKSPACE_X[0], WORKSPACE_Y[0]])
        hi = np.array([WORKSPACE_X[1], WORKSPACE_Y[1]])
        clipped = np.clip(pos, lo, hi)
        if not np.array_equal(clipped, pos):
            s.out_of_workspace = True
            clamped = True
        s.tool_pose = Pose(position=clipped, angle=wrap_angle(s.tool_pose.angle + dth))

        self._measure(dx=float(dxy[0]))
        s.step_count += 1
        self._update_phase()

        done = s.task_phase in (PHASE_SUCCESS, PHASE_FAILURE)
        info = {
            "clamped": clamped,
            "phase": s.task_phase,
            "penetration": self._penetration(),
            "true_normal_force": s.true_normal_force,
            "failure_reason": s.failure_reason,
        }
        return self._observe(), s.contact_force.force.copy(), done, info

    def _update_phase(self) -> None:
        s, task = self.state, self.task
        p = self._penetration()
        f_meas = s.contact_force
        f_mag = f_meas.magnitude()
        in_contact = p > 0.0

        s.peak_force = max(s.peak_force, f_mag)
        if in_contact:
            s.contacted_ever = True
            if abs(s.tool_pose.position[0] - task.target_x) <= task.location_tol:
                s.peak_force_at_target = max(s.peak_force_at_target, s.true_normal_force)

        if f_mag > task.force_limit:
            s.limit_breached = True
            s.task_phase = PHASE_FAILURE
            s.failure_reason = FAIL_EXCESSIVE_FORCE
            return

        if task.kind == "push_hold":
            in_band = (
                in_contact
                and abs(float(f_meas.force[1]) - task.force_target) <= task.hold_band
            )
            s.hold_counter = s.hold_counter + 1 if in_band else 0
            if s.hold_counter >= task.hold_steps:
                s.task_phase = PHASE_SUCCESS
                return
            s.task_phase = PHASE_HOLDING if s.hold_counter > 0 else (
                PHASE_CONTACT if in_contact else PHASE_FREE
            )
        else:
            if (
                not s.triggered
                and in_contact
                and s.true_normal_force >= s.trigger_force_true
                and abs(s.tool_pose.position[0] - task.target_x) <= task.location_tol
            ):
                s.triggered = True
            if s.triggered:
                clear = s.tool_pose.position[1] >= self.surface_y + task.retract_clearance
                if not in_contact and clear:
                    s.task_phase = PHASE_SUCCESS
                    return
                s.task_phase = PHASE_TRIGGERED
            else:
                s.task_phase = PHASE_CONTACT if in_contact else PHASE_FREE

        if s.step_count >= task.max_steps:
            s.task_phase = PHASE_FAILURE
            s.failure_reason = self._timeout_reason()

    def _timeout_reason(self) -> str:
        s, task = self.state, self.task
        if task.kind == "push_hold":
            return FAIL_NO_STABLE_HOLD if s.contacted_ever else FAIL_NO_CONTACT
        if not s.contacted_ever:
            return FAIL_NO_CONTACT
        if s.triggered:
            return FAIL_NO_RETRACTION
        if s.peak_force >= s.trigger_force_true:
            # pressed hard enough somewhere, but never latched at the target
            return FAIL_WRONG_LOCATION
        return FAIL_PREMATURE_RELEASE

    def abort(self, reason: str) -> None:
        """External abort (safety stop); marks the episode failed."""
        self.state.task_phase = PHASE_FAILURE
        self.state.failure_reason = reason


def success(state: ContactState, task: TaskSpec) -> tuple[bool, str | None]:
    """Final judgment for a finished episode."""
    if state.task_phase == PHASE_SUCCESS:
        return True, None
    if state.task_phase == PHASE_FAILURE:
        return False, state.failure_reason or FAIL_TIMEOUT
    raise ValueError("episode has not ended")


class ScriptedExpert:
    """Privileged demonstration policy: nominal approach plus a force servo
    along the contact normal using the true (noise-free) contact force."""

    def __init__(
        self,
        task: TaskSpec,
        servo_gain: float = 0.5,
        nominal_stiffness: float = 2000.0,
        approach_step: float = 0.01,
        descend_step: float = 0.005,
    ):
        self.task = task
        self.servo_gain = servo_gain
        self.nominal_stiffness = nominal_stiffness
        self.approach_step = approach_step
        self.descend_step = descend_step

    def act(self, sim: PlanarContactSim) -> np.ndarray:
        s = sim.state
        x, y = s.tool_pose.position
        surf = sim.surface_y
        f_true = s.true_normal_force
        dx = dy = 0.0

        lateral_err = self.task.target_x - x
        if abs(lateral_err) > 0.002:
            dx = float(np.clip(lateral_err, -self.approach_step, self.approach_step))
            hover = surf + 0.02
            dy = float(np.clip(hover - y, -self.approach_step, self.approach_step))
            return np.array([dx, dy, 0.0])

        if self.task.kind == "push_hold":
            if f_true < 0.3 and y - surf > 0.002:
                dy = -min(self.descend_step, y - surf - 0.001)
            else:
                corr = self.servo_gain * (self.task.force_target - f_true) / self.nominal_stiffness
                dy = float(np.clip(-corr, -0.003, 0.003))
            return np.array([0.0, dy, 0.0])

        # threshold_trigger: press just past the hidden trigger force, then retract
        if s.triggered:
            return np.array([0.0, self.descend_step, 0.0])
        if f_true < 0.3 and y - surf > 0.002:
            dy = -min(self.descend_step, y - surf - 0.001)
        else:
            goal = s.trigger_force_true + 0.5
            corr = 0.8 * (goal - f_true) / s.env_stiffness
            dy = float(np.clip(-corr, -0.003, 0.0005))
        return np.array([0.0, dy, 0.0])
