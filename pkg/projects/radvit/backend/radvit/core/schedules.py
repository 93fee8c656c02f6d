import math
from dataclasses import asdict, dataclass
from typing import Dict

from radvit.exceptions import RangeError


def cosine_schedule(step: int, total: int, start: float, end: float) -> float:
    """Half-cosine from start (step 0) to end (step total), endpoints exact"""

    if total <= 0:
        raise RangeError(f"Schedule length must be positive, got {total}")
    if step < 0 or step > total:
        raise RangeError(f"Step {step} outside of [0, {total}]")

    if step == 0:
        return start
    if step == total:
        return end

    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float
    min_lr: float
    weight_decay_start: float
    weight_decay_end: float
    momentum_start: float
    momentum_end: float
    warmup_teacher_temp: float
    teacher_temp: float
    warmup_steps: int
    teacher_temp_warmup_steps: int
    total_steps: int

    @classmethod
    def from_epochs(
        cls,
        epochs: int,
        steps_per_epoch: int,
        warmup_epochs: float,
        base_lr: float,
        min_lr: float = 0.0,
        weight_decay_start: float = 0.0,
        weight_decay_end: float = 0.0,
        momentum_start: float = 1.0,
        momentum_end: float = 1.0,
        warmup_teacher_temp: float = 1.0,
        teacher_temp: float = 1.0,
        teacher_temp_warmup_fraction: float = 0.0,
    ) -> "TrainSchedule":

        total = max(1, epochs * steps_per_epoch)
        warmup = min(total, int(round(warmup_epochs * steps_per_epoch)))
        temp_warmup = min(total, int(round(teacher_temp_warmup_fraction * total)))
        return cls(
            base_lr=base_lr,
            min_lr=min_lr,
            weight_decay_start=weight_decay_start,
            weight_decay_end=weight_decay_end,
            momentum_start=momentum_start,
            momentum_end=momentum_end,
            warmup_teacher_temp=warmup_teacher_temp,
            teacher_temp=teacher_temp,
            warmup_steps=warmup,
            teacher_temp_warmup_steps=temp_warmup,
            total_steps=total,
        )

    def _check(self, step: int) -> None:
        if step < 0 or step > self.total_steps:
            raise RangeError(f"Step {step} outside of [0, {self.total_steps}]")

    def lr(self, step: int) -> float:
        self._check(step)
        if step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        decay_steps = self.total_steps - self.warmup_steps
        if decay_steps == 0:
            return self.base_lr
        return cosine_schedule(
            step - self.warmup_steps, decay_steps, self.base_lr, self.min_lr
        )

    def weight_decay(self, step: int) -> float:
        self._check(step)
        return cosine_schedule(
            step, self.total_steps, self.weight_decay_start, self.weight_decay_end
        )

    def momentum(self, step: int) -> float:
        self._check(step)
        return cosine_schedule(
            step, self.total_steps, self.momentum_start, self.momentum_end
        )

    def teacher_temperature(self, step: int) -> float:
        self._check(step)
        if step >= self.teacher_temp_warmup_steps:
            return self.teacher_temp
        progress = step / self.teacher_temp_warmup_steps
        return self.warmup_teacher_temp + (
            self.teacher_temp - self.warmup_teacher_temp
        ) * progress

    def state(self, step: int) -> Dict[str, float]:
        """Values at step, used in logs and diagnostic dumps"""
        values: Dict[str, float] = {"step": step}
        values.update(
            lr=self.lr(step),
            weight_decay=self.weight_decay(step),
            momentum=self.momentum(step),
            teacher_temp=self.teacher_temperature(step),
        )
        return values

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)
