from .dataset import Dataset, DatasetError, Episode, generate_dataset, load_dataset, run_expert_episode, save_dataset
from .expert import expert_action
from .world import (COLORS, GRASP_RADIUS, IMAGE_SIZE, TABLE_Z, TASK_KINDS, TRAIN_COLORS,
                    UNSEEN_COLORS, VARIANTS, TaskSpec, WorldState, default_task, render,
                    render_views, reset, state_pose, step, success)

__all__ = [
    "COLORS", "Dataset", "DatasetError", "Episode", "GRASP_RADIUS", "IMAGE_SIZE",
    "TABLE_Z", "TASK_KINDS", "TRAIN_COLORS", "TaskSpec", "UNSEEN_COLORS", "VARIANTS",
    "WorldState", "default_task", "expert_action", "generate_dataset", "load_dataset",
    "render", "render_views", "reset", "run_expert_episode", "save_dataset",
    "state_pose", "step", "success",
]
