"""Frame and event encoders plus the spatiotemporal mapper.

Both modalities share the same patch geometry: each temporal slice is cut
into non-overlapping s x s patches, flattened, linearly embedded to d, offset
by a learnable per-patch position embedding, and run through a small stack of
pre-norm transformer blocks. The mapper then pools the [T, P, d] grid into
per-patch spatial tokens [P, d] and per-step temporal tokens [T, d] with
inner-product attention against the mean feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .errors import BadWindow, PatchSizeMismatch, TooFewFrames
from .io_formats import EventStream, FrameSequence
from .nn_core import Tensor


@dataclass
class VoxelGrid:
    """Per-bin ON/OFF event counts: int64 [bins, 2, H, W], channel 0 = ON."""
    bins: int
    height: int
    width: int
    counts: np.ndarray


def voxelize(stream: EventStream, bins: int, t0: int, t1: int) -> VoxelGrid:
    """Histogram events into `bins` uniform time bins over [t0, t1); events
    outside the window are dropped. ON/OFF totals are conserved exactly."""
    if t1 <= t0:
        raise BadWindow(f"bad window [{t0}, {t1})")
    if bins <= 0:
        raise BadWindow(f"bins must be positive, got {bins}")
    counts = np.zeros((bins, 2, stream.height, stream.width), dtype=np.int64)
    if len(stream):
        inside = (stream.t >= t0) & (stream.t < t1)
        t = stream.t[inside]
        b = (bins * (t - t0) // (t1 - t0)).astype(np.int64)
        ch = (stream.p[inside] < 0).astype(np.int64)  # 0 = ON, 1 = OFF
        np.add.at(counts, (b, ch, stream.y[inside], stream.x[inside]), 1)
    return VoxelGrid(bins, stream.height, stream.width, counts)


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix):
        return {f"{prefix}.{k}": v for k, v in self.__dict__.items()}


@dataclass
class EncoderParams:
    patch: int
    d: int
    in_channels: int
    w_embed: Tensor  # [in_channels * patch^2, d]
    pos: Tensor      # [P, d]
    blocks: list

    def named(self, prefix):
        out = {f"{prefix}.embed": self.w_embed, f"{prefix}.pos": self.pos}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.block{i}"))
        return out


def init_encoder_params(rng, height, width, patch, d, depth, in_channels=1,
                        hidden_mult=2) -> EncoderParams:
    if height % patch or width % patch:
        raise PatchSizeMismatch(f"patch {patch} must divide {height}x{width}")
    p_count = (height // patch) * (width // patch)
    pd = in_channels * patch * patch
    blocks = []
    for _ in range(depth):
        blocks.append(BlockParams(
            ln1_gamma=nn.parameter(np.ones(d, np.float32)),
            ln1_beta=nn.parameter(np.zeros(d, np.float32)),
            w_q=nn.parameter(rng.matrix(d, d)),
            w_k=nn.parameter(rng.matrix(d, d)),
            w_v=nn.parameter(rng.matrix(d, d)),
            ln2_gamma=nn.parameter(np.ones(d, np.float32)),
            ln2_beta=nn.parameter(np.zeros(d, np.float32)),
            w1=nn.parameter(rng.matrix(d, hidden_mult * d)),
            b1=nn.parameter(np.zeros(hidden_mult * d, np.float32)),
            w2=nn.parameter(rng.matrix(hidden_mult * d, d)),
            b2=nn.parameter(np.zeros(d, np.float32)),
        ))
    return EncoderParams(
        patch=patch, d=d, in_channels=in_channels,
        w_embed=nn.parameter(rng.matrix(pd, d)),
        pos=nn.parameter(rng.matrix(p_count, d)),
        blocks=blocks,
    )


def patchify(slices: np.ndarray, patch: int) -> np.ndarray:
    """[T, C, H, W] -> [T, P, C * patch^2] with row-major patch order."""
    t, c, h, w = slices.shape
    if h % patch or w % patch:
        raise PatchSizeMismatch(f"patch {patch} must divide {h}x{w}")
    gh, gw = h // patch, w // patch
    x = slices.reshape(t, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # [T, gh, gw, C, p, p]
    return np.ascontiguousarray(x.reshape(t, gh * gw, c * patch * patch))


def _encode_slices(tokens: np.ndarray, params: EncoderParams) -> Tensor:
    """Shared embedding + transformer stack over patchified slices."""
    if tokens.shape[-1] != params.w_embed.shape[0]:
        raise PatchSizeMismatch(
            f"patch dim {tokens.shape[-1]} vs embed {params.w_embed.shape[0]}")
    x = nn.matmul(Tensor(tokens.astype(params.w_embed.data.dtype)), params.w_embed)
    x = x + params.pos
    for blk in params.blocks:
        normed = nn.layer_norm(x, blk.ln1_gamma, blk.ln1_beta)
        q = nn.matmul(normed, blk.w_q)
        k = nn.matmul(normed, blk.w_k)
        v = nn.matmul(normed, blk.w_v)
        scores = nn.matmul(q, nn.transpose_last(k)) * (1.0 / math.sqrt(params.d))
        x = x + nn.matmul(nn.softmax(scores, axis=-1), v)
        normed = nn.layer_norm(x, blk.ln2_gamma, blk.ln2_beta)
        x = x + nn.mlp2(normed, blk.w1, blk.b1, blk.w2, blk.b2)
    return x


def encode_frames(frames: FrameSequence, params: EncoderParams) -> Tensor:
    """FrameSequence -> feature grid Tensor [T, P, d]."""
    if len(frames) < 1:
        raise TooFewFrames("encode_frames needs at least one frame")
    tokens = patchify(frames.pixels[:, None, :, :], params.patch)
    return _encode_slices(tokens, params)


def encode_events(grid: VoxelGrid, params: EncoderParams) -> Tensor:
    """VoxelGrid -> feature grid Tensor [B, P, d]; ON/OFF counts enter as two
    channels, normalized per grid to keep activations in a sane range."""
    counts = grid.counts.astype(np.float32)
    scale = max(1.0, float(counts.max()))
    tokens = patchify(counts / scale, params.patch)
    return _encode_slices(tokens, params)


def st_map(f: Tensor):
    """[T, P, d] -> (spatial tokens [P, d], temporal tokens [T, d]).

    Spatial token per patch: attention over time against the temporal mean;
    temporal token per step: attention over patches against the spatial mean.
    """
    t, p, d = f.shape
    scale = 1.0 / math.sqrt(d)
    g_mean = f.mean(axis=0, keepdims=True)              # [1, P, d]
    a = nn.softmax((f * g_mean).sum(axis=2) * scale, axis=0)   # [T, P]
    f_s = (a.reshape(t, p, 1) * f).sum(axis=0)          # [P, d]
    h_mean = f.mean(axis=1, keepdims=True)              # [T, 1, d]
    b = nn.softmax((f * h_mean).sum(axis=2) * scale, axis=1)   # [T, P]
    f_t = (b.reshape(t, p, 1) * f).sum(axis=1)          # [T, d]
    return f_s, f_t
