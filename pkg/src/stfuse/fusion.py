"""Hierarchical frame-event fusion.

Cross-attention spatial fusion (frame features as the primary/residual
branch), cross-attention temporal fusion (event features primary), and a
single self-attention matching pass over the concatenated token set. The
matching step has no residual or normalization by default; a post-norm
variant exists for the ablation harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .errors import ShapeMismatch
from .nn_core import Tensor


@dataclass
class AttentionParams:
    """Shared-dimension q/k/v projections, all [d_in, d]."""
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @property
    def d(self):
        return self.w_q.shape[1]

    def named(self, prefix):
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k,
                f"{prefix}.w_v": self.w_v}


@dataclass
class CrossAttnParams:
    attn: AttentionParams
    gamma: Tensor
    beta: Tensor

    def named(self, prefix):
        out = self.attn.named(prefix)
        out[f"{prefix}.gamma"] = self.gamma
        out[f"{prefix}.beta"] = self.beta
        return out


@dataclass
class FusionParams:
    spatial: CrossAttnParams
    temporal: CrossAttnParams
    matching: AttentionParams


def init_attention_params(rng, d) -> AttentionParams:
    return AttentionParams(
        w_q=nn.parameter(rng.matrix(d, d)),
        w_k=nn.parameter(rng.matrix(d, d)),
        w_v=nn.parameter(rng.matrix(d, d)),
    )


def init_cross_attn_params(rng, d) -> CrossAttnParams:
    return CrossAttnParams(
        attn=init_attention_params(rng, d),
        gamma=nn.parameter(np.ones(d, np.float32)),
        beta=nn.parameter(np.zeros(d, np.float32)),
    )


def init_matching_params(rng, d) -> AttentionParams:
    """Identity-leaning init: the matching block has no residual path, so a
    fully random init would scramble token identity before the head can use
    it. Start near a pass-through (diagonal-dominant q/k makes self-attention
    sharp on each token, near-identity values) and let training move away."""
    eye = np.eye(d, dtype=np.float32)
    return AttentionParams(
        w_q=nn.parameter(eye + rng.matrix(d, d)),
        w_k=nn.parameter(eye + rng.matrix(d, d)),
        w_v=nn.parameter(eye + rng.matrix(d, d)),
    )


def init_fusion_params(rng, d) -> FusionParams:
    return FusionParams(
        spatial=init_cross_attn_params(rng, d),
        temporal=init_cross_attn_params(rng, d),
        matching=init_matching_params(rng, d),
    )


def _cross_attend(primary: Tensor, secondary: Tensor, p: CrossAttnParams) -> Tensor:
    """Residual cross-attention: queries from the primary branch, keys and
    values from the secondary; layer-norm on primary + attended."""
    if primary.shape[-1] != secondary.shape[-1]:
        raise ShapeMismatch(f"cross-attention dims {primary.shape} vs {secondary.shape}")
    d = p.attn.d
    q = nn.matmul(primary, p.attn.w_q)
    k = nn.matmul(secondary, p.attn.w_k)
    v = nn.matmul(secondary, p.attn.w_v)
    scores = nn.matmul(q, nn.transpose_last(k)) * (1.0 / math.sqrt(d))
    attended = nn.matmul(nn.softmax(scores, axis=-1), v)
    return nn.layer_norm(primary + attended, p.gamma, p.beta)


def cross_attn_spatial(f_vs: Tensor, f_es: Tensor, params: CrossAttnParams) -> Tensor:
    """Spatial fusion [N, d]: frame spatial tokens primary, event secondary.
    Both modalities share the patch grid, so token counts must match."""
    if f_vs.shape != f_es.shape:
        raise ShapeMismatch(f"spatial token sets differ: {f_vs.shape} vs {f_es.shape}")
    return _cross_attend(f_vs, f_es, params)


def cross_attn_temporal(f_et: Tensor, f_vt: Tensor, params: CrossAttnParams) -> Tensor:
    """Temporal fusion [M, d]: event temporal tokens primary (temporally
    dense), frame tokens secondary; token counts may differ."""
    return _cross_attend(f_et, f_vt, params)


def self_attn_match(f_s: Tensor, f_t: Tensor, params: AttentionParams,
                    post_norm=None) -> Tensor:
    """Joint self-attention over Concat(f_s, f_t) -> [N+M, d]; rows [0, N)
    track the spatial tokens, [N, N+M) the temporal ones. No residual or
    normalization unless a (gamma, beta) pair is passed as post_norm."""
    if f_s.shape[-1] != f_t.shape[-1]:
        raise ShapeMismatch(f"matching dims {f_s.shape} vs {f_t.shape}")
    f = nn.concat([f_s, f_t], axis=0)
    d = params.d
    q = nn.matmul(f, params.w_q)
    k = nn.matmul(f, params.w_k)
    v = nn.matmul(f, params.w_v)
    scores = nn.matmul(q, nn.transpose_last(k)) * (1.0 / math.sqrt(d))
    out = nn.matmul(nn.softmax(scores, axis=-1), v)
    if post_norm is not None:
        gamma, beta = post_norm
        out = nn.layer_norm(f + out, gamma, beta)
    return out
