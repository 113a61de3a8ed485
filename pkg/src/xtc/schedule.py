"""KD stage machine, per-stage warmup/linear-decay learning rate, budget presets."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigurationError, RangeError

KINDS = ("one_stage", "two_stage", "three_stage")

# (gamma, beta) per stage
_STAGE_WEIGHTS = {
    "one_stage": ((1, 1),),
    "two_stage": ((0, 1), (1, 0)),
    "three_stage": ((0, 1), (1, 1), (1, 0)),
}


def _check_kind(kind):
    if kind not in KINDS:
        raise ConfigurationError(f"unknown KD schedule {kind!r}; expected one of {KINDS}", path="kd.kind")


def stage_boundaries(total_steps, kind):
    """Half-open stage intervals ``[start, end)`` with floored boundaries."""
    _check_kind(kind)
    n = len(_STAGE_WEIGHTS[kind])
    cuts = [0] + [(total_steps * i) // n for i in range(1, n)] + [total_steps]
    return list(zip(cuts[:-1], cuts[1:]))


def stage_at(t, total_steps, kind):
    """Return ``(gamma, beta, stage_index)`` for step ``t`` (0-based)."""
    _check_kind(kind)
    if not 0 <= t < total_steps:
        raise RangeError(f"step {t} outside [0, {total_steps})")
    for i, (start, end) in enumerate(stage_boundaries(total_steps, kind)):
        if start <= t < end:
            g, b = _STAGE_WEIGHTS[kind][i]
            return g, b, i
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class LRSchedule:
    peak_lr: float
    total_steps: int
    kind: str = "one_stage"
    warmup_fraction: float = 0.10
    stage_one_multiplier: float = 2.5

    def __post_init__(self):
        _check_kind(self.kind)
        if not 0 < self.warmup_fraction < 1:
            raise ConfigurationError("must be in (0, 1)", path="warmup_fraction")
        if self.total_steps < 1:
            raise ConfigurationError("must be >= 1", path="total_steps")
        if self.peak_lr < 0:
            raise ConfigurationError("must be >= 0", path="peak_lr")

    @property
    def boundaries(self):
        return stage_boundaries(self.total_steps, self.kind)

    def stage_peak(self, stage):
        if self.kind != "one_stage" and stage == 0:
            return self.peak_lr * self.stage_one_multiplier
        return self.peak_lr

    def __call__(self, t):
        return lr_at(t, self)


def warmup_steps(stage_len, fraction):
    return max(1, math.floor(fraction * stage_len))


def lr_at(t, schedule, kind=None):
    """Linear warmup to the stage peak over 10% of the stage, then linear decay to 0.

    ``kind`` overrides the schedule's own stage structure when given.
    """
    if kind is not None and kind != schedule.kind:
        schedule = LRSchedule(schedule.peak_lr, schedule.total_steps, kind,
                              schedule.warmup_fraction, schedule.stage_one_multiplier)
    if not 0 <= t < schedule.total_steps:
        raise RangeError(f"step {t} outside [0, {schedule.total_steps})")
    for i, (start, end) in enumerate(schedule.boundaries):
        if start <= t < end:
            break
    n = end - start
    w = warmup_steps(n, schedule.warmup_fraction)
    peak = schedule.stage_peak(i)
    k = t - start
    # ratio first so the warmup endpoint is exactly the peak
    if k < w:
        return peak * (k / w)
    return peak * ((n - k) / (n - w))


# -- budget presets ------------------------------------------------------------

TASK_CLASSES = ("large_no_DA", "qnli_like", "small_DA", "cola_mrpc_like")
BUDGETS = ("A", "B", "C")

# (augmented?, {budget: (default epochs, longer alternative)})
_TABLE = {
    "large_no_DA": (False, {"A": (3, 3), "B": (9, 9), "C": (18, 36)}),
    "qnli_like": (True, {"A": (1, 1), "B": (3, 3), "C": (6, 9)}),
    "small_DA": (True, {"A": (1, 1), "B": (3, 3), "C": (12, 12)}),
    "cola_mrpc_like": (True, {"A": (1, 1), "B": (3, 3), "C": (12, 18)}),
}


@dataclass(frozen=True)
class BudgetCell:
    epochs: int
    augmented: bool


def budget_preset(label, task_class, longer=False):
    """Epoch count for a budget label and task class.

    Cells listing two values ("18 or 36") return the smaller unless
    ``longer`` is set.
    """
    if task_class not in _TABLE:
        raise ConfigurationError(f"unknown task class {task_class!r}; expected one of {TASK_CLASSES}",
                                 path="budget.task_class")
    if label not in BUDGETS:
        raise ConfigurationError(f"unknown budget {label!r}; expected one of {BUDGETS}", path="budget.label")
    augmented, cells = _TABLE[task_class]
    short, long_ = cells[label]
    return BudgetCell(long_ if longer else short, augmented)


def total_steps(epochs, dataset_size, batch_size):
    return epochs * math.ceil(dataset_size / batch_size)
