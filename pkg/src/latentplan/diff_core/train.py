"""Generic Adam training loop over a module's parameters."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .optim import adam_init, adam_step

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    """Raised when a loss turns non-finite; carries the last finite parameters."""

    def __init__(self, stage: str, step: int, components: dict, last_params: dict):
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"{stage}: non-finite loss at step {step} ({parts})")
        self.stage = stage
        self.step = step
        self.components = components
        self.last_params = last_params


@dataclass
class TrainSettings:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    log_every: int = 50
    lr_final_frac: float = 1.0  # cosine decay to lr * lr_final_frac; 1.0 keeps lr constant

    def lr_at(self, step: int) -> float:
        if self.lr_final_frac == 1.0 or self.steps <= 1:
            return self.lr
        frac = 0.5 * (1 + math.cos(math.pi * step / (self.steps - 1)))
        return self.lr * (self.lr_final_frac + (1 - self.lr_final_frac) * frac)


def train_loop(module: nn.Module, loss_fn: Callable[[int], tuple[torch.Tensor, dict]],
               settings: TrainSettings, stage: str,
               parameters: dict[str, nn.Parameter] | None = None) -> list[dict]:
    """Run ``settings.steps`` Adam updates of ``loss_fn`` and return the loss curve.

    ``loss_fn(step)`` returns the scalar loss and a dict of float components to
    log. Only ``parameters`` (default: all of ``module``'s) are updated.
    """
    params = parameters if parameters is not None else dict(module.named_parameters())
    state = adam_init({k: p.detach() for k, p in params.items()}, lr=settings.lr)
    names = list(params)
    curve: list[dict] = []
    for step in range(settings.steps):
        loss, info = loss_fn(step)
        lv = loss.item()
        if not math.isfinite(lv):
            raise TrainingDiverged(stage, step, {"loss": lv, **info},
                                   {k: p.detach().clone() for k, p in params.items()})
        grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
        gd = {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)}
        state = dataclasses.replace(state, lr=settings.lr_at(step))
        new, state = adam_step({k: p.detach() for k, p in params.items()}, gd, state)
        with torch.no_grad():
            for k, p in params.items():
                p.copy_(new[k])
        if step % settings.log_every == 0 or step == settings.steps - 1:
            row = {"step": step, "loss": lv, **info}
            curve.append(row)
            log.debug("%s step %d loss %.6g", stage, step, lv)
    return curve
