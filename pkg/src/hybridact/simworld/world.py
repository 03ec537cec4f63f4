"""Deterministic point-effector manipulation world.

A unit-cube workspace with a table plane, colored disc objects, colored
square targets and one cross-shaped effector per arm. Physics is
integration plus an attach rule: closing the gripper within the grasp
radius of a free object attaches it, opening drops it to table height.
The dual-arm ball moves only while both effectors grip it.

Everything is seeded and pure-numpy, so a (seed, task, variant, action
stream) tuple reproduces the exact same trajectory. Generalization
variants draw object colors, backgrounds, heights and lighting from
held-out ranges disjoint from the training ranges.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..seeding import stream

IMAGE_SIZE = 32
TABLE_Z = 0.1
GRASP_RADIUS = 0.03
ACTION_CLAMP = 0.1          # per-axis translation and rotation clamp
ANGLE_LIMIT = np.pi / 2
GRIPPER_THRESHOLD = 0.5

VARIANTS = ("nominal", "unseen_object", "unseen_background", "unseen_height", "unseen_lighting")

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.10, 0.85, 0.85),
    "pink": (0.95, 0.45, 0.70),
}
TRAIN_COLORS = ("red", "green", "blue", "yellow")
UNSEEN_COLORS = ("purple", "orange", "cyan", "pink")

TRAIN_BACKGROUND = (0.15, 0.15, 0.15)
UNSEEN_BACKGROUNDS = ((0.05, 0.10, 0.30), (0.30, 0.20, 0.05), (0.08, 0.28, 0.16))
UNSEEN_HEIGHT_BAND = (0.15, 0.30)       # object z offset above the table
UNSEEN_BRIGHTNESS_BAND = (0.45, 0.75)   # training brightness is exactly 1.0

TASK_KINDS = ("reach", "pick_place", "rotate_align", "dual_lift_place")


@dataclass
class TaskSpec:
    kind: str
    instruction_template: str
    arms: int = 1
    eps_pos: float = 0.05
    eps_yaw: float = 0.2
    max_steps: int = 40

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind '{self.kind}'")
        if self.kind == "dual_lift_place" and self.arms != 2:
            raise ValueError("dual_lift_place requires arms = 2")


def default_task(kind: str, templates: dict[str, str] | None = None) -> TaskSpec:
    if templates is None:
        from ..tokens import load_templates
        templates = load_templates()
    arms = 2 if kind == "dual_lift_place" else 1
    return TaskSpec(kind=kind, instruction_template=templates[kind], arms=arms)


@dataclass
class Obj:
    color: str
    pos: np.ndarray
    yaw: float = 0.0
    held_by: int = -1       # arm index, or 2 for a dual grip, -1 when free


@dataclass
class Target:
    color: str
    pos: np.ndarray
    required_yaw: float | None = None


@dataclass
class WorldState:
    task: TaskSpec
    effectors: np.ndarray               # [arms, 7] absolute pose
    objects: list[Obj]
    targets: list[Target]
    goal_object: int                    # index into objects (-1 if none)
    goal_target: int                    # index into targets
    instruction: str
    background: tuple[float, float, float]
    brightness: float
    step_count: int = 0
    variant: str = "nominal"
    expert_speed: float = 1.0           # per-episode expert step-size factor


def _sample_xy(rng, taken: list[np.ndarray], min_sep: float = 0.2) -> np.ndarray:
    for _ in range(200):
        xy = rng.uniform(0.2, 0.8, size=2)
        if all(np.linalg.norm(xy - t[:2]) >= min_sep for t in taken):
            return xy
    return xy  # workspace is roomy enough that this is unreachable in practice


def _effector_start(rng, x_range=(0.2, 0.8)) -> np.ndarray:
    pose = np.zeros(7)
    pose[0] = rng.uniform(*x_range)
    pose[1] = rng.uniform(0.2, 0.8)
    pose[2] = rng.uniform(0.3, 0.5)
    pose[3:6] = rng.uniform(-0.3, 0.3, size=3)
    return pose


def reset(task: TaskSpec, seed: int, variant: str = "nominal") -> WorldState:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}', expected one of {VARIANTS}")
    rng = stream(seed, "world", task.kind, variant)

    colors = list(TRAIN_COLORS)
    rng.shuffle(colors)
    obj_z = TABLE_Z
    if variant == "unseen_height":
        obj_z = TABLE_Z + rng.uniform(*UNSEEN_HEIGHT_BAND)
    background = TRAIN_BACKGROUND
    if variant == "unseen_background":
        background = UNSEEN_BACKGROUNDS[rng.integers(len(UNSEEN_BACKGROUNDS))]
    brightness = 1.0
    if variant == "unseen_lighting":
        brightness = float(rng.uniform(*UNSEEN_BRIGHTNESS_BAND))

    def goal_color() -> str:
        if variant == "unseen_object":
            return UNSEEN_COLORS[rng.integers(len(UNSEEN_COLORS))]
        return colors[0]

    taken: list[np.ndarray] = []
    objects: list[Obj] = []
    targets: list[Target] = []
    goal_object = -1

    if task.kind == "reach":
        main = goal_color()
        for idx, color in enumerate([main, colors[1]]):
            xy = _sample_xy(rng, taken)
            taken.append(xy)
            targets.append(Target(color, np.array([*xy, TABLE_Z])))
        instruction = task.instruction_template.format(color=main)
        goal_target = 0
    elif task.kind in ("pick_place", "rotate_align"):
        main = goal_color()
        for color in (main, colors[1]):
            xy = _sample_xy(rng, taken)
            taken.append(xy)
            yaw = float(rng.uniform(-0.4, 0.4)) if task.kind == "rotate_align" else 0.0
            objects.append(Obj(color, np.array([*xy, obj_z]), yaw=yaw))
        xy = _sample_xy(rng, taken)
        taken.append(xy)
        req = float(rng.uniform(-0.4, 0.4)) if task.kind == "rotate_align" else None
        targets.append(Target(colors[2], np.array([*xy, TABLE_Z]), required_yaw=req))
        instruction = task.instruction_template.format(color=main, target=colors[2])
        goal_object, goal_target = 0, 0
    else:  # dual_lift_place
        main = goal_color()
        xy = _sample_xy(rng, taken)
        taken.append(xy)
        objects.append(Obj(main, np.array([*xy, obj_z])))
        xy = _sample_xy(rng, taken)
        targets.append(Target(colors[2], np.array([*xy, TABLE_Z])))
        instruction = task.instruction_template.format(target=colors[2])
        goal_object, goal_target = 0, 0

    if task.arms == 1:
        effectors = _effector_start(rng)[None]
    else:
        effectors = np.stack([_effector_start(rng, (0.05, 0.35)),
                              _effector_start(rng, (0.65, 0.95))])

    # varying the demonstration tempo diversifies the recorded actions for
    # the same spatial configuration, which matters a lot at 100 demos
    expert_speed = float(rng.uniform(0.45, 0.9))

    return WorldState(task=task, effectors=effectors, objects=objects, targets=targets,
                      goal_object=goal_object, goal_target=goal_target,
                      instruction=instruction, background=background,
                      brightness=brightness, variant=variant, expert_speed=expert_speed)


def state_pose(s: WorldState) -> np.ndarray:
    """Flat robot-state vector fed to the policy: [arms * 7]."""
    return s.effectors.reshape(-1).astype(np.float64)


def step(s: WorldState, action: np.ndarray) -> WorldState:
    """Integrate one action; returns a new WorldState."""
    action = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(action)):
        raise ValueError("step: action contains NaN or inf")
    action = action.reshape(s.task.arms, 7)

    eff = s.effectors.copy()
    objects = [replace(o, pos=o.pos.copy()) for o in s.objects]

    for arm in range(s.task.arms):
        delta = action[arm]
        eff[arm, :3] = np.clip(eff[arm, :3] + np.clip(delta[:3], -ACTION_CLAMP, ACTION_CLAMP), 0.0, 1.0)
        eff[arm, 3:6] = np.clip(eff[arm, 3:6] + np.clip(delta[3:6], -ACTION_CLAMP, ACTION_CLAMP),
                                -ANGLE_LIMIT, ANGLE_LIMIT)
        eff[arm, 6] = 1.0 if delta[6] > GRIPPER_THRESHOLD else 0.0

    if s.task.kind == "dual_lift_place":
        # Held while both grippers stay closed around it: grabbing requires
        # both effectors within the grasp radius of the ball, keeping the
        # grip requires them to stay within the radius of the tracked ball
        # (i.e. within twice the radius of each other). Anything else drops
        # the ball to table height.
        ball = objects[0]
        closed = eff[0, 6] > 0.5 and eff[1, 6] > 0.5
        if ball.held_by == 2:
            holding = closed and np.linalg.norm(eff[0, :3] - eff[1, :3]) < 2 * GRASP_RADIUS
        else:
            holding = closed and all(
                np.linalg.norm(eff[a, :3] - ball.pos) < GRASP_RADIUS for a in range(2))
        if holding:
            ball.held_by = 2
            ball.pos = 0.5 * (eff[0, :3] + eff[1, :3])
        else:
            ball.held_by = -1
            ball.pos[2] = TABLE_Z
    else:
        for arm in range(s.task.arms):
            held = next((o for o in objects if o.held_by == arm), None)
            if eff[arm, 6] > 0.5:
                if held is None:
                    for o in objects:
                        if o.held_by == -1 and np.linalg.norm(eff[arm, :3] - o.pos) < GRASP_RADIUS:
                            o.held_by = arm
                            held = o
                            break
                if held is not None:
                    held.pos = eff[arm, :3].copy()
                    held.yaw = float(eff[arm, 5])
            elif held is not None:
                held.held_by = -1
                held.pos[2] = TABLE_Z

    return replace(s, effectors=eff, objects=objects, step_count=s.step_count + 1)


def success(s: WorldState, task: TaskSpec | None = None) -> bool:
    """Strict less-than tolerances everywhere."""
    task = task or s.task
    if task.kind == "reach":
        goal = s.targets[s.goal_target].pos
        return bool(np.linalg.norm(s.effectors[0, :3] - goal) < task.eps_pos)
    if task.kind in ("pick_place", "rotate_align"):
        obj = s.objects[s.goal_object]
        tgt = s.targets[s.goal_target]
        placed = (np.linalg.norm(obj.pos - tgt.pos) < task.eps_pos
                  and obj.held_by == -1 and s.effectors[0, 6] < 0.5)
        if task.kind == "rotate_align" and tgt.required_yaw is not None:
            placed = placed and abs(obj.yaw - tgt.required_yaw) < task.eps_yaw
        return bool(placed)
    ball = s.objects[0]
    tgt = s.targets[s.goal_target]
    return bool(np.linalg.norm(ball.pos - tgt.pos) < task.eps_pos and ball.held_by == -1)


# -------------------------------------------------------------- rendering

def _paint(img: np.ndarray, px: int, py: int, color, stencil, alpha: float = 1.0) -> None:
    h, w = img.shape[:2]
    color = np.asarray(color)
    for dx, dy in stencil:
        x, y = px + dx, py + dy
        if 0 <= x < w and 0 <= y < h:
            img[y, x] = alpha * color + (1.0 - alpha) * img[y, x]


_DISC = [(dx, dy) for dx in range(-2, 3) for dy in range(-2, 3) if dx * dx + dy * dy <= 3]
_SQUARE = [(dx, dy) for dx in range(-2, 3) for dy in range(-2, 3)]


def _cross(half: int) -> list[tuple[int, int]]:
    return [(d, 0) for d in range(-half, half + 1)] + [(0, d) for d in range(-half, half + 1)]


def _to_px(v: float) -> int:
    return int(np.clip(v, 0.0, 1.0 - 1e-9) * IMAGE_SIZE)


def render(s: WorldState, view: str = "top") -> np.ndarray:
    """Orthographic raster, float32 in [0, 1], intensities scaled by brightness.

    The top view maps x->column, y->row; the side view (used as the
    second dual-arm view) maps x->column, z->row. The effector cross
    lengthens with height so altitude stays observable from the top view,
    and turns gray when the gripper is closed.
    """
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float64)
    img[:] = s.background

    def project(p: np.ndarray) -> tuple[int, int]:
        if view == "top":
            return _to_px(p[0]), _to_px(p[1])
        return _to_px(p[0]), IMAGE_SIZE - 1 - _to_px(p[2])

    for t in s.targets:
        px, py = project(t.pos)
        _paint(img, px, py, COLORS[t.color], _SQUARE)
    for o in s.objects:
        px, py = project(o.pos)
        _paint(img, px, py, COLORS[o.color], _DISC)
    for arm in range(s.task.arms):
        e = s.effectors[arm]
        px, py = project(e[:3])
        color = (0.55, 0.55, 0.55) if e[6] > 0.5 else (0.98, 0.98, 0.98)
        half = 1 + int(round(e[2] * 4))
        # semi-transparent so the effector never fully hides what it hovers over
        _paint(img, px, py, color, _cross(half), alpha=0.6)

    return np.clip(img * s.brightness, 0.0, 1.0).astype(np.float32)


def render_views(s: WorldState) -> np.ndarray:
    """All camera views for this task: [V, H, W, 3]."""
    if s.task.arms == 2:
        return np.stack([render(s, "top"), render(s, "side")])
    return render(s, "top")[None]
