"""Adam with per-group learning rates and a milestone decay schedule.

Group base rates follow the training recipe: mipmaps 2e-3, MLP 2e-2, pose
2e-3, velocity 2e-4, each decayed by 0.6x at 1/2, 3/4, 5/6 and 9/10 of the
stage's total steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_GROUP_LRS = {
    "mipmaps": 2e-3,
    "mlp": 2e-2,
    "pose": 2e-3,
    "velocity": 2e-4,
}

DECAY_FACTOR = 0.6
MILESTONE_FRACTIONS = (0.5, 0.75, 5.0 / 6.0, 0.9)


@dataclass
class LrSchedule:
    total_steps: int
    factor: float = DECAY_FACTOR
    fractions: tuple = MILESTONE_FRACTIONS

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        self.milestones = tuple(f * self.total_steps for f in self.fractions)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")


def lr_at(schedule: LrSchedule, base_lr: float, step: int) -> float:
    """Learning rate after applying every milestone decay at or before step."""
    if not (0 <= step < schedule.total_steps):
        raise ValueError(f"step {step} outside schedule of {schedule.total_steps} steps")
    n_decays = sum(1 for m in schedule.milestones if step >= m)
    return base_lr * schedule.factor ** n_decays


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def like(params: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


@dataclass
class ParamGroup:
    """One named parameter set with its own base lr and Adam state."""

    name: str
    params: dict[str, np.ndarray]
    base_lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    state: AdamState = None
    skipped_steps: int = 0

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.like(self.params)

    def reset_state(self) -> None:
        self.state = AdamState.like(self.params)
        self.skipped_steps = 0


def adam_step(group: ParamGroup, grads: dict[str, np.ndarray], lr: float) -> None:
    """Bias-corrected Adam update in place; skips the group on non-finite grads."""
    for key, g in grads.items():
        if group.params[key].shape != np.shape(g):
            raise ValueError(f"gradient shape mismatch for {group.name}.{key}")
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        group.skipped_steps += 1
        logger.warning(
            "non-finite gradient in group %r; update skipped (%d so far)",
            group.name, group.skipped_steps,
        )
        return
    st = group.state
    st.step += 1
    bc1 = 1.0 - group.beta1 ** st.step
    bc2 = 1.0 - group.beta2 ** st.step
    for key, g in grads.items():
        st.m[key] = group.beta1 * st.m[key] + (1.0 - group.beta1) * g
        st.v[key] = group.beta2 * st.v[key] + (1.0 - group.beta2) * (g * g)
        m_hat = st.m[key] / bc1
        v_hat = st.v[key] / bc2
        group.params[key] = group.params[key] - lr * m_hat / (np.sqrt(v_hat) + group.eps)
