"""Exponential-moving-average teacher for mean-teacher training.

The teacher starts as an exact copy of the student and is never touched by
the optimizer; after every optimizer step its parameters are pulled toward
the student's with

    theta_t <- alpha * theta_t + (1 - alpha) * theta_s

where alpha ramps up as min(alpha, (step + 1) / (step + 10)) so early
teachers follow the student closely.
"""

from __future__ import annotations

import copy

import torch
from torch import nn

from .errors import ConfigError


class EmaTeacher:
    """Holds the teacher model and applies EMA updates.

    Args:
        student: the model to copy; the copy is detached from autograd.
        ema_decay: asymptotic decay alpha, in [0, 1).
    """

    def __init__(self, student: nn.Module, ema_decay: float = 0.99):
        if not 0.0 <= ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {ema_decay}")
        self.ema_decay = ema_decay
        self.step = 0
        self.model = copy.deepcopy(student)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.model.eval()

    @torch.no_grad()
    def update(self, student: nn.Module, alpha_override: float | None = None) -> float:
        """One EMA step; returns the effective alpha that was applied.

        ``alpha_override`` bypasses both the configured decay and the
        warm-up, applying exactly the given alpha.
        """
        if alpha_override is not None:
            if not 0.0 <= alpha_override <= 1.0:
                raise ConfigError(f"alpha_override must be in [0, 1], got {alpha_override}")
            alpha = alpha_override
        else:
            alpha = min(self.ema_decay, (self.step + 1) / (self.step + 10))
        teacher_params = dict(self.model.named_parameters())
        student_params = dict(student.named_parameters())
        if set(teacher_params) != set(student_params):
            raise ValueError("student and teacher parameter names do not match")
        for name, tp in teacher_params.items():
            sp = student_params[name]
            if tp.shape != sp.shape:
                raise ValueError(f"parameter '{name}' changed shape between student and teacher")
            tp.mul_(alpha).add_(sp.detach(), alpha=1.0 - alpha)
        # plain buffers (nothing here keeps running statistics) are copied through
        teacher_buffers = dict(self.model.named_buffers())
        for name, sb in student.named_buffers():
            teacher_buffers[name].copy_(sb)
        self.step += 1
        return alpha

    @torch.no_grad()
    def forward(self, *args, **kwargs):
        """Run the teacher model without building a graph."""
        return self.model(*args, **kwargs)

    def state_dict(self) -> dict:
        return {"model": self.model.state_dict(), "step": self.step,
                "ema_decay": self.ema_decay}

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.step = int(state["step"])
        self.ema_decay = float(state["ema_decay"])
