"""Multi-head-attention fusion of several teachers' features, and the relation loss.

Each teacher's penultimate vector becomes one token. The token sequence goes
through a single post-norm transformer encoder block and is mean-pooled into
one fused teacher representation that the student is trained to match.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError
from .losses import Projection, _projected_mse

MAX_TEACHERS = 3


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 128
    num_heads: int = 4
    ffn_dim: int = 256
    use_teacher_embeddings: bool = True
    pool: str = "mean"

    def __post_init__(self):
        if min(self.d_model, self.num_heads, self.ffn_dim) < 1:
            raise ConfigurationError("attention dims must be >= 1", "attention")
        if self.d_model % self.num_heads:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}", "attention.num_heads"
            )
        if self.pool != "mean":
            raise ConfigurationError(f"unsupported pool {self.pool!r}", "attention.pool")

    def to_dict(self):
        return asdict(self)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x):
        """Return (output, attention) with attention shaped B x heads x N x N."""
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = scores.softmax(dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(ctx), attn


class EncoderBlock(nn.Module):
    """Self-attention + residual + LayerNorm, then FFN + residual + LayerNorm."""

    def __init__(self, d_model: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d_model, num_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(nn.Linear(d_model, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, d_model))
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x):
        a, attn = self.attn(x)
        x = self.norm1(x + a)
        x = self.norm2(x + self.ffn(x))
        return x, attn


class TeacherFusion(nn.Module):
    def __init__(self, teacher_dims: list[int], config: AttentionConfig | None = None):
        super().__init__()
        config = config or AttentionConfig()
        if len(teacher_dims) < 2:
            raise ConfigurationError("fusion needs at least two teachers", "teacher_ids")
        if len(teacher_dims) > MAX_TEACHERS:
            raise ConfigurationError(f"fusion supports at most {MAX_TEACHERS} teachers", "teacher_ids")
        self.config = config
        self.teacher_dims = list(teacher_dims)
        self.input_proj = nn.ModuleList(nn.Linear(w, config.d_model) for w in teacher_dims)
        if config.use_teacher_embeddings:
            self.teacher_embedding = nn.Parameter(torch.randn(len(teacher_dims), config.d_model) * 0.02)
        else:
            self.register_parameter("teacher_embedding", None)
        self.encoder = EncoderBlock(config.d_model, config.num_heads, config.ffn_dim)
        self.last_attention = None

    @property
    def out_dim(self):
        return self.config.d_model

    def permuted(self, order):
        """Copy whose teacher slots are reordered; identity embeddings stay with the slot."""
        other = copy.deepcopy(self)
        other.input_proj = nn.ModuleList(copy.deepcopy(self.input_proj[i]) for i in order)
        other.teacher_dims = [self.teacher_dims[i] for i in order]
        return other

    def tokens(self, features):
        if len(features) != len(self.input_proj):
            raise ConfigurationError(f"expected {len(self.input_proj)} teacher features, got {len(features)}")
        batch = {f.shape[0] for f in features}
        if len(batch) != 1:
            raise InputError(f"teacher feature batch sizes differ: {sorted(batch)}")
        tokens = torch.stack([proj(f) for proj, f in zip(self.input_proj, features)], dim=1)
        if self.teacher_embedding is not None:
            tokens = tokens + self.teacher_embedding
        return tokens

    def forward(self, features):
        # teacher features are constants; only fusion parameters learn
        features = [f.detach() for f in features]
        if len(features) < 2:
            raise ConfigurationError("fusion needs at least two teachers", "teacher_ids")
        encoded, attn = self.encoder(self.tokens(features))
        self.last_attention = attn.detach()
        return encoded.mean(dim=1)


def fuse_teacher_features(features, config: AttentionConfig | None = None, params: TeacherFusion | None = None):
    """Fuse one feature batch per teacher into a B x d_model representation.

    ``params`` carries the learnable fusion weights; a fresh block is built from
    ``config`` when it is omitted.
    """
    if len(features) < 2:
        raise ConfigurationError("fusion needs at least two teachers", "teacher_ids")
    if params is None:
        params = TeacherFusion([f.shape[-1] for f in features], config)
    return params(features)


def relation_distillation_loss(f_star, f_student, proj_teacher: Projection, proj_student: Projection):
    """MSE between projected fused-teacher and student features.

    Unlike the single-teacher feature loss, ``f_star`` is not detached: the
    fusion block learns through this loss.
    """
    return _projected_mse(f_star, f_student, proj_teacher, proj_student)
