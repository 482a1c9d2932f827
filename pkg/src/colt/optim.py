"""SGD-with-momentum and Adam, plus the warmup/step-anneal learning-rate schedule.

Weight decay is the coupled L2 form (``g + wd * w``) for both optimizers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor


class NumericFault(FloatingPointError):
    def __init__(self, name: str, detail: str = "non-finite value in update"):
        super().__init__(f"{detail} for tensor {name!r}")
        self.tensor_name = name


@dataclass
class LRSchedule:
    """Linear warmup over the first epoch, then divide by ``anneal_factor`` at each milestone.

    Milestones are fractions of the total epoch budget, e.g. ``(0.4, 0.6, 0.9)``
    for drops at epochs 20/30/45 of 50.
    """

    base_lr: float
    steps_per_epoch: int
    epochs: int
    warmup: bool = True
    anneal_at: Sequence[float] = (0.4, 0.6, 0.9)
    anneal_factor: float = 5.0

    def lr_at(self, step: int) -> float:
        epoch = step // max(self.steps_per_epoch, 1)
        lr = self.base_lr
        for frac in self.anneal_at:
            if epoch >= int(round(frac * self.epochs)):
                lr /= self.anneal_factor
        if self.warmup and step < self.steps_per_epoch:
            lr *= (step + 1) / self.steps_per_epoch
        return lr


@dataclass
class OptimizerState:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}; expected 'adam' or 'sgd'")


def optimizer_step(params: Mapping[str, Tensor], opt: OptimizerState, lr: float | None = None) -> None:
    """Apply one update in place to every tensor in ``params`` that has a gradient."""
    lr = opt.lr if lr is None else lr
    opt.step_count += 1
    t = opt.step_count
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if opt.weight_decay:
            g = g + opt.weight_decay * p.data
        slot = opt.slots.setdefault(name, {})
        if opt.kind == "sgd":
            if opt.momentum:
                buf = slot.get("momentum")
                buf = g.copy() if buf is None else opt.momentum * buf + g
                slot["momentum"] = buf
                g = buf
            update = lr * g
        else:
            b1, b2 = opt.betas
            m = slot.get("m")
            v = slot.get("v")
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            slot["m"], slot["v"] = m, v
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            update = lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        if not np.all(np.isfinite(update)):
            raise NumericFault(name)
        p.data -= update.astype(p.data.dtype, copy=False)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
