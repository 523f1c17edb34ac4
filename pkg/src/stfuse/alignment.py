"""Language-vision coordinate alignment.

Projects fused features into token space with a 2-layer MLP, maps a
normalized bbox / time interval query through learnable linear matrices into
a single coordinate token, and adds that token (scaled by a learnable alpha)
to every visual token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .errors import InvalidCoordinate, ShapeMismatch
from .nn_core import Tensor


@dataclass(frozen=True)
class CoordinateQuery:
    """Normalized query coordinates; masks mark which half is actually given
    (the other half is the grounding target). Masked-off halves contribute a
    zero vector to the coordinate token."""
    p: tuple = (0.0, 0.0, 1.0, 1.0)  # (x1, y1, x2, y2)
    t: tuple = (0.0, 1.0)            # (t0, t1)
    mask_p: bool = False
    mask_t: bool = False

    def __post_init__(self):
        x1, y1, x2, y2 = self.p
        t0, t1 = self.t
        if self.mask_p and not (x1 < x2 and y1 < y2):
            raise InvalidCoordinate(f"bbox ordering violated: {self.p}")
        if self.mask_t and not (t0 < t1):
            raise InvalidCoordinate(f"interval ordering violated: {self.t}")


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix):
        return {f"{prefix}.{k}": v for k, v in self.__dict__.items()}


@dataclass
class AlignParams:
    projector: MLPParams   # d -> d_tok
    w_p: Tensor            # [4, d_tok]
    w_t: Tensor            # [2, d_tok]
    alpha: Tensor          # scalar, learnable


def init_mlp_params(rng, d_in, d_hidden, d_out) -> MLPParams:
    return MLPParams(
        w1=nn.parameter(rng.matrix(d_in, d_hidden)),
        b1=nn.parameter(np.zeros(d_hidden, np.float32)),
        w2=nn.parameter(rng.matrix(d_hidden, d_out)),
        b2=nn.parameter(np.zeros(d_out, np.float32)),
    )


def init_align_params(rng, d, d_tok, hidden_mult=8, alpha0=0.1) -> AlignParams:
    """alpha starts small so early training is content-dominated; the zero
    coordinate regime of stage 1 forces it to 0 during that stage anyway.

    The projector's first layer is wide and over-scaled on purpose: with many
    strongly nonlinear random features the mean-pooled regression objective
    becomes close to a linear fit in the second layer, which plain SGD solves
    quickly. A narrow near-linear first layer learns the same readout an
    order of magnitude slower."""
    projector = init_mlp_params(rng, d, hidden_mult * d, d_tok)
    projector.w1.data *= 4.0
    # coordinate maps start structured rather than random: a random map makes
    # the coord token look like noise, so the optimizer silences alpha before
    # the head learns to read it. A given interval is written as (t0, t1)
    # into the same token slots the content stages plant the scene interval
    # into (dims 4-5), giving one shared temporal readout. A given box is
    # written as (cx, cy, w, h) into free slots (dims 8-11): the spatial
    # content readout is much weaker than the alpha-scaled copy, and sharing
    # slots lets the copy drown it.
    if d_tok < 6:
        raise ShapeMismatch(f"d_tok must be at least 6, got {d_tok}")
    base = 8 if d_tok >= 12 else 0  # tiny dims: overlap rather than fail
    w_p = np.zeros((4, d_tok), np.float32)
    w_p[0, base + 0] = w_p[2, base + 0] = 0.5   # cx
    w_p[1, base + 1] = w_p[3, base + 1] = 0.5   # cy
    w_p[0, base + 2], w_p[2, base + 2] = -1.0, 1.0  # w
    w_p[1, base + 3], w_p[3, base + 3] = -1.0, 1.0  # h
    w_t = np.zeros((2, d_tok), np.float32)
    w_t[0, 4] = w_t[1, 5] = 1.0
    return AlignParams(
        projector=projector,
        w_p=nn.parameter(w_p),
        w_t=nn.parameter(w_t),
        alpha=nn.parameter(np.asarray(alpha0, dtype=np.float32)),
    )


def project_tokens(f_st: Tensor, projector: MLPParams) -> Tensor:
    """Row-wise MLP projection [K, d] -> [K, d_tok]."""
    return nn.mlp2(f_st, projector.w1, projector.b1, projector.w2, projector.b2)


def coord_token(q: CoordinateQuery, params: AlignParams) -> Tensor:
    """Single coordinate token [d_tok] = p^T w_p + t^T w_t over given halves."""
    d_tok = params.w_p.shape[1]
    dtype = params.w_p.data.dtype
    out = None
    if q.mask_p:
        pvec = Tensor(np.asarray(q.p, dtype=dtype).reshape(1, 4))
        out = nn.matmul(pvec, params.w_p)
    if q.mask_t:
        tvec = Tensor(np.asarray(q.t, dtype=dtype).reshape(1, 2))
        vt = nn.matmul(tvec, params.w_t)
        out = vt if out is None else out + vt
    if out is None:
        return Tensor(np.zeros(d_tok, dtype=dtype))
    return out.reshape(d_tok)


def embed_coordinates(v_st: Tensor, v_coord: Tensor, alpha) -> Tensor:
    """Broadcast the coordinate token across all K visual tokens:
    out[i] = v_st[i] + alpha * v_coord."""
    if v_coord.ndim != 1 or v_coord.shape[0] != v_st.shape[-1]:
        raise ShapeMismatch(f"coord token {v_coord.shape} vs tokens {v_st.shape}")
    scaled = v_coord * alpha if isinstance(alpha, Tensor) else v_coord * float(alpha)
    return v_st + scaled.reshape(1, v_coord.shape[0])
