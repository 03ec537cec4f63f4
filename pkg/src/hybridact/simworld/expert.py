"""Scripted expert: phase-based waypoint controller.

The phase is derived from the current state (not stored), so the expert
is a pure policy usable both for dataset generation and as a harness
sanity check. Deltas are proportional steps toward the active waypoint,
clamped per axis; the wrist is leveled (or driven to the required yaw)
during the approach so every action dimension appears in the data.
"""

from __future__ import annotations

import numpy as np

from .world import ACTION_CLAMP, GRASP_RADIUS, TaskSpec, WorldState

_CLOSE_AT = 0.6 * GRASP_RADIUS       # attach margin: close well inside the radius
_RELEASE_FRAC = 0.5                  # release when inside half the tolerance


def _step_toward(current: np.ndarray, goal: np.ndarray, limit: float) -> np.ndarray:
    return np.clip(goal - current, -limit, limit)


def _arm_delta(eff: np.ndarray, waypoint: np.ndarray, yaw_goal: float, grip: float,
               speed: float) -> np.ndarray:
    limit = ACTION_CLAMP * speed
    delta = np.zeros(7)
    delta[:3] = _step_toward(eff[:3], waypoint, limit)
    delta[3:6] = _step_toward(eff[3:6], np.array([0.0, 0.0, yaw_goal]), limit)
    delta[6] = grip
    return delta


def expert_action(s: WorldState, task: TaskSpec | None = None) -> np.ndarray:
    """Expert delta(s) for the current state, flat [arms * 7]."""
    task = task or s.task
    speed = s.expert_speed
    if task.kind == "reach":
        goal = s.targets[s.goal_target].pos
        eff = s.effectors[0]
        grip = 1.0 if np.linalg.norm(eff[:3] - goal) < 0.12 else 0.0
        return _arm_delta(eff, goal, 0.0, grip, speed)

    if task.kind in ("pick_place", "rotate_align"):
        eff = s.effectors[0]
        obj = s.objects[s.goal_object]
        tgt = s.targets[s.goal_target]
        yaw_goal = tgt.required_yaw if (task.kind == "rotate_align"
                                        and tgt.required_yaw is not None) else 0.0
        if obj.held_by == 0:
            at_pos = np.linalg.norm(eff[:3] - tgt.pos) < _RELEASE_FRAC * task.eps_pos
            aligned = abs(eff[5] - yaw_goal) < _RELEASE_FRAC * task.eps_yaw
            grip = 0.0 if (at_pos and aligned) else 1.0
            return _arm_delta(eff, tgt.pos, yaw_goal, grip, speed)
        if np.linalg.norm(obj.pos - tgt.pos) < task.eps_pos and obj.held_by == -1:
            return _arm_delta(eff, eff[:3], yaw_goal, 0.0, speed)   # placed: hold still
        grip = 1.0 if np.linalg.norm(eff[:3] - obj.pos) < _CLOSE_AT else 0.0
        return _arm_delta(eff, obj.pos, 0.0, grip, speed)

    # dual_lift_place: both arms converge on the ball, grip, carry, release
    ball = s.objects[0]
    tgt = s.targets[s.goal_target]
    deltas = np.zeros((2, 7))
    if ball.held_by == 2:
        mid = 0.5 * (s.effectors[0, :3] + s.effectors[1, :3])
        release = np.linalg.norm(mid - tgt.pos) < _RELEASE_FRAC * task.eps_pos
        for arm in range(2):
            offset = np.array([-0.008 if arm == 0 else 0.008, 0.0, 0.0])
            deltas[arm] = _arm_delta(s.effectors[arm], tgt.pos + offset, 0.0,
                                     0.0 if release else 1.0, speed)
    elif np.linalg.norm(ball.pos - tgt.pos) < task.eps_pos:
        for arm in range(2):
            deltas[arm] = _arm_delta(s.effectors[arm], s.effectors[arm, :3], 0.0, 0.0, speed)
    else:
        for arm in range(2):
            offset = np.array([-0.008 if arm == 0 else 0.008, 0.0, 0.0])
            near = np.linalg.norm(s.effectors[arm, :3] - ball.pos) < _CLOSE_AT
            both_near = all(
                np.linalg.norm(s.effectors[a, :3] - ball.pos) < _CLOSE_AT for a in range(2))
            deltas[arm] = _arm_delta(s.effectors[arm], ball.pos + offset, 0.0,
                                     1.0 if (near and both_near) else 0.0, speed)
    return deltas.reshape(-1)
