"""
Convolution-based multi-head self-attention (CMHSA) over spatial positions.

1x1 conv projections produce Q, K, V; channels are split into heads and the
H x W grid is flattened to L positions. Attention weights get inverted
dropout, the weighted values go through a 1x1 out_proj and the input is
added back as a residual.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn

from core_utils import ShapeError
from function.autodiff import ConvParams, Tensor, conv2d, dropout, finalize_op, softmax_rows

DEFAULT_NUM_HEADS = 4
DEFAULT_DROPOUT = 0.1
# Attention memory is O(L^2) per head
MAX_POSITIONS = 4096


@dataclass
class AttentionConfig:
    in_channels: int
    num_heads: int = DEFAULT_NUM_HEADS
    dropout: float = DEFAULT_DROPOUT
    max_positions: int = MAX_POSITIONS

    def __post_init__(self):
        if self.num_heads < 1 or self.in_channels < 1:
            raise ShapeError(f"invalid attention sizes: channels={self.in_channels}, heads={self.num_heads}")
        if self.in_channels % self.num_heads:
            raise ShapeError(f"in_channels {self.in_channels} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeError(f"attention dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.in_channels // self.num_heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


@dataclass
class QKVProjection:
    w_q: ConvParams
    w_k: ConvParams
    w_v: ConvParams
    out_proj: ConvParams

    def validate(self, channels: int) -> None:
        for name in ('w_q', 'w_k', 'w_v', 'out_proj'):
            p = getattr(self, name)
            if p.transposed or p.kernel_size != (1, 1) or (p.in_channels, p.out_channels) != (channels, channels):
                raise ShapeError(f"{name} must be a 1x1 conv {channels}->{channels}")

    @classmethod
    def initialise(cls, channels: int, generator: Optional[torch.Generator] = None,
                   std: float = 0.02, dtype: torch.dtype = torch.float64) -> "QKVProjection":
        def conv():
            weight = torch.randn(channels, channels, 1, 1, generator=generator, dtype=dtype) * std
            return ConvParams(weight, torch.zeros(channels, dtype=dtype))

        return cls(w_q=conv(), w_k=conv(), w_v=conv(), out_proj=conv())


@dataclass
class AttentionScores:
    """Per-head [N, heads, L, L] score matrices."""
    attn: Tensor
    alpha: Tensor
    mask: Tensor
    alpha_prime: Tensor


def _split_heads(t: Tensor, cfg: AttentionConfig) -> Tensor:
    # [N, C, H, W] -> [N, heads, L, head_dim]; channel c = head * head_dim + d
    n, _, h, w = t.shape
    return t.reshape(n, cfg.num_heads, cfg.head_dim, h * w).transpose(2, 3)


def reshape_back(out: Tensor, height: int, width: int) -> Tensor:
    """Inverse of the head split: [N, heads, L, head_dim] -> [N, C, H, W]."""
    n, heads, length, head_dim = out.shape
    if length != height * width:
        raise ShapeError(f"{length} positions cannot be laid out as {height}x{width}")
    return out.transpose(2, 3).reshape(n, heads * head_dim, height, width)


def project_qkv(x: Tensor, w: QKVProjection, cfg: AttentionConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """Q = W_q X, K = W_k X, V = W_v X, each reshaped to [N, heads, L, head_dim]."""
    if x.dim() != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"CMHSA expects {cfg.in_channels} channels, got shape {tuple(x.shape)}")
    length = x.shape[2] * x.shape[3]
    if length > cfg.max_positions:
        raise ShapeError(f"{length} spatial positions exceed the attention cap of {cfg.max_positions}")
    w.validate(cfg.in_channels)
    return tuple(_split_heads(conv2d(x, p), cfg) for p in (w.w_q, w.w_k, w.w_v))


def attention_weights(q: Tensor, k: Tensor, cfg: AttentionConfig,
                      generator: Optional[torch.Generator] = None,
                      training: bool = True) -> AttentionScores:
    """attn = Q K^T * scale, alpha = softmax(attn), alpha' = dropout(alpha)."""
    if q.shape != k.shape or q.dim() != 4 or q.shape[-1] != cfg.head_dim:
        raise ShapeError(f"query {tuple(q.shape)} and key {tuple(k.shape)} do not match the head layout")
    attn = finalize_op("attention_scores", (q, k), torch.matmul(q, k.transpose(-2, -1)) * cfg.scale)
    alpha = softmax_rows(attn)
    alpha_prime, mask = dropout(alpha, cfg.dropout, generator=generator, training=training)
    return AttentionScores(attn=attn, alpha=alpha, mask=mask, alpha_prime=alpha_prime)


def attention_apply(scores: AttentionScores, v: Tensor) -> Tensor:
    """Output_i = sum_j alpha'_ij V_j, per head."""
    weights = scores.alpha_prime
    if v.dim() != 4 or weights.shape[:3] != v.shape[:3] or weights.shape[-1] != v.shape[2]:
        raise ShapeError(f"attention weights {tuple(weights.shape)} do not fit values {tuple(v.shape)}")
    return finalize_op("attention_apply", (weights, v), torch.matmul(weights, v))


def cmhsa_forward(x: Tensor, w: QKVProjection, cfg: AttentionConfig,
                  generator: Optional[torch.Generator] = None,
                  training: bool = True) -> Tensor:
    """Y = out_proj(reshape_back(Output)) + X; same shape as X."""
    q, k, v = project_qkv(x, w, cfg)
    scores = attention_weights(q, k, cfg, generator=generator, training=training)
    attended = reshape_back(attention_apply(scores, v), x.shape[2], x.shape[3])
    return finalize_op("residual_add", (x,), conv2d(attended, w.out_proj) + x)


class CmhsaBlock(nn.Module):
    """Trainable CMHSA block; parameters live in nn modules, math in cmhsa_forward."""

    def __init__(self, channels: int, num_heads: int = DEFAULT_NUM_HEADS,
                 dropout: float = DEFAULT_DROPOUT, max_positions: int = MAX_POSITIONS):
        super().__init__()
        self.attention_config = AttentionConfig(channels, num_heads, dropout, max_positions)
        self.w_q = nn.Conv2d(channels, channels, 1)
        self.w_k = nn.Conv2d(channels, channels, 1)
        self.w_v = nn.Conv2d(channels, channels, 1)
        self.out_proj = nn.Conv2d(channels, channels, 1)

    def projection(self) -> QKVProjection:
        return QKVProjection(
            w_q=ConvParams(self.w_q.weight, self.w_q.bias),
            w_k=ConvParams(self.w_k.weight, self.w_k.bias),
            w_v=ConvParams(self.w_v.weight, self.w_v.bias),
            out_proj=ConvParams(self.out_proj.weight, self.out_proj.bias),
        )

    def forward(self, x: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
        return cmhsa_forward(x, self.projection(), self.attention_config,
                             generator=generator, training=self.training)
