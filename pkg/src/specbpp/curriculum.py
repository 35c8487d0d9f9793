"""Two-axis difficulty schedule for permutation pretraining.

Axis one is the segment count: a latching phase machine that starts at
3 segments and advances one phase per validation pass (accuracy at or
above the next unpassed threshold), capping at 8. Passed thresholds
never revert, so the phase index is monotone even when accuracy drops
after a switch to a harder task.

Axis two is the within-phase sampling temperature: a linear ramp from
T_min to T_max over ``phase_length_hint`` epochs, restarting at T_min
whenever the phase changes. Low temperature concentrates the sampler
on near-identity permutations; high temperature approaches uniform.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import MAX_SEGMENTS, MIN_SEGMENTS
from .perms import BoltzmannSampler

__all__ = [
    "CurriculumState",
    "Schedule",
    "PhaseTransition",
    "update",
    "temperature",
    "task_spec",
]

N_PHASES = MAX_SEGMENTS - MIN_SEGMENTS  # five advancement thresholds


@dataclass(frozen=True)
class Schedule:
    """Temperature ramp parameters."""

    t_min: float = 1.0
    t_max: float = 100.0
    phase_length_hint: int = 15

    def __post_init__(self):
        if not (0.0 < self.t_min <= self.t_max):
            raise ValueError(f"need 0 < t_min <= t_max, got {self.t_min}, {self.t_max}")
        if self.phase_length_hint < 1:
            raise ValueError(f"phase_length_hint must be >= 1, got {self.phase_length_hint}")


@dataclass(frozen=True)
class CurriculumState:
    """Phase machine snapshot; immutable, updated once per epoch."""

    thresholds: tuple = (0.99,) * N_PHASES
    passed: tuple = (False,) * N_PHASES
    epoch: int = 0
    phase_start_epoch: int = 0

    def __post_init__(self):
        if len(self.thresholds) != N_PHASES or len(self.passed) != N_PHASES:
            raise ValueError(f"need exactly {N_PHASES} thresholds and flags")
        if any(not (0.0 < t <= 1.0) for t in self.thresholds):
            raise ValueError("thresholds must lie in (0, 1]")
        # passed flags fill from the front; a gap would desync current_n
        flags = list(self.passed)
        if flags != sorted(flags, reverse=True):
            raise ValueError(f"passed flags must be a prefix, got {self.passed}")

    @property
    def current_n(self) -> int:
        return MIN_SEGMENTS + sum(self.passed)

    @property
    def done(self) -> bool:
        return all(self.passed)


@dataclass(frozen=True)
class PhaseTransition:
    """One advancement event, serialized to the phase log."""

    epoch: int
    old_n: int
    new_n: int
    val_acc: float
    temperature: float

    def record(self) -> dict:
        return {
            "epoch": self.epoch,
            "old_n": self.old_n,
            "new_n": self.new_n,
            "val_acc": self.val_acc,
            "temperature": self.temperature,
        }


def update(state: CurriculumState, val_acc: float, schedule: Schedule = Schedule()) -> tuple:
    """Consume one epoch's validation accuracy; returns (state, transition).

    At most one threshold can pass per call. On a pass the phase start
    resets to the next epoch (so the temperature ramp restarts at
    T_min) and a PhaseTransition is returned to signal that the
    permutation head must be rebuilt for the new segment count; the
    transition is None otherwise. The epoch counter always advances.
    """
    if not 0.0 <= val_acc <= 1.0:
        raise ValueError(f"val_acc must be in [0, 1], got {val_acc}")
    advanced = state
    transition = None
    if not state.done:
        nxt = sum(state.passed)
        if val_acc >= state.thresholds[nxt]:
            flags = list(state.passed)
            flags[nxt] = True
            transition = PhaseTransition(
                epoch=state.epoch,
                old_n=state.current_n,
                new_n=state.current_n + 1,
                val_acc=val_acc,
                temperature=temperature(state, schedule),
            )
            advanced = replace(state, passed=tuple(flags), phase_start_epoch=state.epoch + 1)
    return replace(advanced, epoch=state.epoch + 1), transition


def temperature(state: CurriculumState, schedule: Schedule) -> float:
    """Linear ramp t_min -> t_max over phase_length_hint epochs in-phase."""
    progress = (state.epoch - state.phase_start_epoch) / schedule.phase_length_hint
    progress = min(max(progress, 0.0), 1.0)
    return schedule.t_min + (schedule.t_max - schedule.t_min) * progress


def task_spec(state: CurriculumState, schedule: Schedule) -> tuple:
    """Current (n_segments, sampler) pair for the training loop."""
    return state.current_n, BoltzmannSampler(state.current_n, temperature(state, schedule))
