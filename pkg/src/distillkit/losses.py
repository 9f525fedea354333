"""Response- and feature-based distillation losses and the weighted objective.

Both divergence functionals are mean squared error. Teacher-side inputs are
always detached, so no gradient can flow back into a teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError

LOSS_TERMS = ("ce", "resp", "feat", "rel")


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.get_default_dtype())


def softmax_with_temperature(z, temperature: float = 1.0) -> torch.Tensor:
    """Soft targets ``exp(z_i/T) / sum_j exp(z_j/T)`` over the last axis."""
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}", "temperature")
    z = _as_tensor(z)
    if not torch.isfinite(z).all():
        raise InputError("logits must be finite")
    scaled = z / temperature
    scaled = scaled - scaled.max(dim=-1, keepdim=True).values
    e = scaled.exp()
    return e / e.sum(dim=-1, keepdim=True)


def response_distillation_loss(z_teacher, z_student, temperature: float = 1.0, on_logits: bool = False):
    """MSE between teacher and student soft targets (or raw logits if ``on_logits``)."""
    z_teacher, z_student = _as_tensor(z_teacher), _as_tensor(z_student)
    if z_teacher.shape != z_student.shape:
        raise InputError(f"logit shapes differ: {tuple(z_teacher.shape)} vs {tuple(z_student.shape)}")
    z_teacher = z_teacher.detach()
    if on_logits:
        return F.mse_loss(z_student, z_teacher)
    p_t = softmax_with_temperature(z_teacher, temperature)
    p_s = softmax_with_temperature(z_student, temperature)
    return F.mse_loss(p_s, p_t)


class Projection(nn.Module):
    """Learnable linear map aligning feature widths; identity when ``identity=True``."""

    def __init__(self, in_dim: int, out_dim: int, identity: bool = False):
        super().__init__()
        if identity and in_dim != out_dim:
            raise ConfigurationError(f"identity projection needs in_dim == out_dim ({in_dim} != {out_dim})")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.map = nn.Identity() if identity else nn.Linear(in_dim, out_dim)

    @classmethod
    def identity(cls, dim: int):
        return cls(dim, dim, identity=True)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise InputError(f"projection expects width {self.in_dim}, got {x.shape[-1]}")
        return self.map(x)


def _projected_mse(f_t, f_s, proj_t: Projection, proj_s: Projection):
    if proj_t.out_dim != proj_s.out_dim:
        raise ConfigurationError(f"projection widths differ: {proj_t.out_dim} vs {proj_s.out_dim}")
    f_t, f_s = _as_tensor(f_t), _as_tensor(f_s)
    if f_t.shape[0] != f_s.shape[0]:
        raise InputError(f"batch sizes differ: {f_t.shape[0]} vs {f_s.shape[0]}")
    return F.mse_loss(proj_s(f_s), proj_t(f_t))


def feature_distillation_loss(f_teacher, f_student, proj_teacher: Projection, proj_student: Projection):
    """MSE between projected teacher and student features (mean over batch and width)."""
    return _projected_mse(_as_tensor(f_teacher).detach(), f_student, proj_teacher, proj_student)


@dataclass(frozen=True)
class LossWeights:
    resp: float = 1.0
    feat: float = 1.0
    rel: float = 1.0

    def __post_init__(self):
        for name in ("resp", "feat", "rel"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be non-negative", f"loss_weights.{name}")

    def as_tuple(self):
        return (self.resp, self.feat, self.rel)


@dataclass
class LossBreakdown:
    """Named loss terms; ``total`` is a tensor so it can be back-propagated."""

    ce: torch.Tensor
    total: torch.Tensor
    weights: LossWeights
    resp: torch.Tensor | None = None
    feat: torch.Tensor | None = None
    rel: torch.Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        out = {name: _scalar(getattr(self, name)) for name in LOSS_TERMS if getattr(self, name) is not None}
        out["total"] = _scalar(self.total)
        return out


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_loss(ce, resp=None, feat=None, rel=None, weights: LossWeights | None = None) -> LossBreakdown:
    weights = weights or LossWeights()
    total = ce
    for term, w in ((resp, weights.resp), (feat, weights.feat), (rel, weights.rel)):
        if term is not None:
            total = total + w * term
    return LossBreakdown(ce=ce, total=total, weights=weights, resp=resp, feat=feat, rel=rel)
