"""Grounding head, IoU metrics, loss, and the synthetic moving-shapes
benchmark generator.

Each synthetic scene is a bright square on a dark 64x64 background, moving
linearly while visible during a sub-interval of the 2 s scene. Frames are
sampled sparsely (4 fps); events come from a dense 1 ms internal rendering
run through the event simulator. Ground truth is the square's time-averaged
bounding box over its visible interval plus that interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .errors import BadConfig, InvalidBox
from .event_sim import SimConfig, simulate_events
from .io_formats import EventStream, FrameSequence, SceneAnnotation
from .nn_core import Tensor, XorShift64Star


# --------------------------------------------------------------------------
# metrics

def s_iou(a, b) -> float:
    """Spatial IoU of two (x1, y1, x2, y2) boxes; 0 when disjoint."""
    for box in (a, b):
        x1, y1, x2, y2 = box
        if x1 > x2 or y1 > y2:
            raise InvalidBox(f"box ordering violated: {box}")
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else (1.0 if inter == 0 else 0.0)


def t_iou(a, b) -> float:
    """Temporal IoU of two (t0, t1) intervals; the 1-D analog of s_iou."""
    for iv in (a, b):
        if iv[0] > iv[1]:
            raise InvalidBox(f"interval ordering violated: {iv}")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else (1.0 if inter == 0 else 0.0)


# --------------------------------------------------------------------------
# grounding head

@dataclass
class GroundingHead:
    pool: Tensor   # [d_tok] attention-pooling query
    out_p: Tensor  # [d_tok, 4]
    b_p: Tensor    # [4]
    out_t: Tensor  # [d_tok, 2]
    b_t: Tensor    # [2]

    def named(self, prefix):
        return {f"{prefix}.{k}": v for k, v in self.__dict__.items()}


def init_grounding_head(rng, d_tok) -> GroundingHead:
    """Zero pool query = uniform attention at the start, i.e. the head begins
    by reading the token mean. Small output weights and biases near the
    logit of a typical target keep the logistic outputs away from their flat
    tails early on; once an output saturates its gradient underflows and the
    coordinate is stuck for good."""
    return GroundingHead(
        pool=nn.parameter(np.zeros(d_tok, np.float32)),
        out_p=nn.parameter(0.05 * rng.matrix(d_tok, 4)),
        b_p=nn.parameter(np.array([-0.4, -0.4, 0.4, 0.4], np.float32)),
        out_t=nn.parameter(0.05 * rng.matrix(d_tok, 2)),
        b_t=nn.parameter(np.array([-0.5, 0.5], np.float32)),
    )


def ground(tokens: Tensor, head: GroundingHead):
    """Attention-pool the token set, then predict a bbox and interval through
    linear heads squashed by the logistic function. Outputs are reordered so
    x1 <= x2, y1 <= y2, t0 <= t1."""
    d_tok = head.pool.shape[0]
    scores = nn.matmul(tokens, head.pool.reshape(d_tok, 1)) * (1.0 / np.sqrt(d_tok))
    a = nn.softmax(scores, axis=0)
    pooled = nn.matmul(nn.transpose_last(a), tokens)  # [1, d_tok]
    raw_p = nn.sigmoid(nn.matmul(pooled, head.out_p) + head.b_p).reshape(4)
    raw_t = nn.sigmoid(nn.matmul(pooled, head.out_t) + head.b_t).reshape(2)
    box = nn.concat([
        nn.minimum(raw_p[0:1], raw_p[2:3]),
        nn.minimum(raw_p[1:2], raw_p[3:4]),
        nn.maximum(raw_p[0:1], raw_p[2:3]),
        nn.maximum(raw_p[1:2], raw_p[3:4]),
    ], axis=0)
    interval = nn.concat([
        nn.minimum(raw_t[0:1], raw_t[1:2]),
        nn.maximum(raw_t[0:1], raw_t[1:2]),
    ], axis=0)
    return box, interval


def _giou_box(pred: Tensor, gt) -> Tensor:
    """Generalized IoU between a predicted box tensor [4] and a constant box;
    finite nonzero gradient even when the boxes are disjoint."""
    gx1, gy1, gx2, gy2 = (float(v) for v in gt)
    iw = nn.maximum(nn.minimum(pred[2:3], gx2) - nn.maximum(pred[0:1], gx1), 0.0)
    ih = nn.maximum(nn.minimum(pred[3:4], gy2) - nn.maximum(pred[1:2], gy1), 0.0)
    inter = iw * ih
    area_p = (pred[2:3] - pred[0:1]) * (pred[3:4] - pred[1:2])
    union = area_p + (gx2 - gx1) * (gy2 - gy1) - inter
    iou = inter / (union + 1e-8)
    cw = nn.maximum(pred[2:3], gx2) - nn.minimum(pred[0:1], gx1)
    ch = nn.maximum(pred[3:4], gy2) - nn.minimum(pred[1:2], gy1)
    hull = cw * ch
    return iou - (hull - union) / (hull + 1e-8)


def _giou_interval(pred: Tensor, gt) -> Tensor:
    g0, g1 = float(gt[0]), float(gt[1])
    inter = nn.maximum(nn.minimum(pred[1:2], g1) - nn.maximum(pred[0:1], g0), 0.0)
    union = (pred[1:2] - pred[0:1]) + (g1 - g0) - inter
    iou = inter / (union + 1e-8)
    hull = nn.maximum(pred[1:2], g1) - nn.minimum(pred[0:1], g0)
    return iou - (hull - union) / (hull + 1e-8)


def grounding_loss(pred_box: Tensor, pred_interval: Tensor,
                   ann: SceneAnnotation) -> Tensor:
    """Mean L1 over the 6 coordinates plus the two (1 - generalized IoU)
    terms with equal weights; zero exactly at a perfect match."""
    gt6 = Tensor(np.asarray([*ann.bbox, *ann.interval], dtype=pred_box.data.dtype))
    pred6 = nn.concat([pred_box, pred_interval], axis=0)
    l1 = nn.absolute(pred6 - gt6).mean()
    return (l1 + (1.0 - _giou_box(pred_box, ann.bbox).sum())
            + (1.0 - _giou_interval(pred_interval, ann.interval).sum()))


# --------------------------------------------------------------------------
# synthetic scene generation

@dataclass(frozen=True)
class GenConfig:
    width: int = 64
    height: int = 64
    duration_us: int = 2_000_000
    n_frames: int = 9            # 4 fps over 2 s, inclusive endpoints
    internal_step_us: int = 1000
    background: float = 0.1
    foreground: float = 0.9
    min_size: int = 20
    max_size: int = 28
    max_speed: float = 12.0      # pixels per second
    contrast_threshold: float = 0.2
    noise_rate_hz: float = 4.0   # per-pixel background-activity events

    def __post_init__(self):
        if self.duration_us % self.internal_step_us:
            raise BadConfig("duration must be a multiple of the internal step")
        if (self.duration_us % (self.n_frames - 1)) if self.n_frames > 1 else 0:
            raise BadConfig("frame rate must divide the duration evenly")
        if not (0.0 <= self.background < self.foreground <= 1.0):
            raise BadConfig("need 0 <= background < foreground <= 1")
        if not (0 < self.min_size <= self.max_size < min(self.width, self.height)):
            raise BadConfig("bad square size range")
        if self.noise_rate_hz < 0:
            raise BadConfig("noise rate must be >= 0")


@dataclass(frozen=True)
class SquareTrack:
    """Generator-side truth: square size, start/end corner positions, and the
    visible interval in microseconds."""
    size: int
    x_start: float
    y_start: float
    x_end: float
    y_end: float
    t_visible: tuple  # (t0_us, t1_us)


@dataclass
class SyntheticScene:
    scene_id: int
    frames: FrameSequence
    events: EventStream
    annotation: SceneAnnotation
    track: SquareTrack
    descriptor: np.ndarray = field(repr=False)  # [cx, cy, w, h, t0, t1, vx, vy]


def track_positions(track: SquareTrack, times_us: np.ndarray, cfg: GenConfig):
    """Integer top-left corner of the square at each visible time; returns
    (visible mask, xs, ys) with xs/ys only for visible times."""
    t0v, t1v = track.t_visible
    visible = (times_us >= t0v) & (times_us < t1v)
    tv = times_us[visible]
    frac = (tv - t0v) / max(1, (t1v - t0v))
    xs = np.rint(track.x_start + (track.x_end - track.x_start) * frac).astype(np.int64)
    ys = np.rint(track.y_start + (track.y_end - track.y_start) * frac).astype(np.int64)
    return visible, xs, ys


def rasterize(track: SquareTrack, times_us: np.ndarray, cfg: GenConfig) -> np.ndarray:
    """Render [len(times), H, W] float32 frames of the track."""
    frames = np.full((len(times_us), cfg.height, cfg.width), cfg.background,
                     dtype=np.float32)
    visible, xs, ys = track_positions(track, times_us, cfg)
    if xs.size:
        rows = np.arange(cfg.height)[None, :]
        cols = np.arange(cfg.width)[None, :]
        my = (rows >= ys[:, None]) & (rows < (ys + track.size)[:, None])
        mx = (cols >= xs[:, None]) & (cols < (xs + track.size)[:, None])
        mask = my[:, :, None] & mx[:, None, :]
        sub = frames[visible]
        sub[mask] = cfg.foreground
        frames[visible] = sub
    return frames


def _track_annotation(track: SquareTrack, cfg: GenConfig) -> SceneAnnotation:
    """Time-averaged bounding box over the visible internal steps plus the
    normalized visible interval."""
    times = np.arange(0, cfg.duration_us + 1, cfg.internal_step_us, dtype=np.int64)
    _, xs, ys = track_positions(track, times, cfg)
    s = track.size
    bbox = (float(xs.mean()) / cfg.width,
            float(ys.mean()) / cfg.height,
            float((xs + s).mean()) / cfg.width,
            float((ys + s).mean()) / cfg.height)
    interval = (track.t_visible[0] / cfg.duration_us,
                track.t_visible[1] / cfg.duration_us)
    return bbox, interval


def gen_scene(scene_id: int, seed: int, cfg: GenConfig) -> SyntheticScene:
    rng = XorShift64Star(seed * 0x9E3779B9 + scene_id + 1)
    step = cfg.internal_step_us
    size = rng.randint(cfg.min_size, cfg.max_size + 1)

    # visible window snapped to the internal step grid
    dur = cfg.duration_us
    length = rng.randint(int(0.20 * dur) // step, int(0.40 * dur) // step + 1) * step
    t0v = rng.randint(int(0.05 * dur) // step,
                      (dur - length - int(0.05 * dur)) // step + 1) * step
    t1v = t0v + length

    x_start = rng.uniform(0, cfg.width - size)
    y_start = rng.uniform(0, cfg.height - size)
    max_disp = cfg.max_speed * (length / 1e6)
    x_end = min(max(x_start + rng.uniform(-max_disp, max_disp), 0), cfg.width - size)
    y_end = min(max(y_start + rng.uniform(-max_disp, max_disp), 0), cfg.height - size)
    track = SquareTrack(size, x_start, y_start, x_end, y_end, (t0v, t1v))

    times_dense = np.arange(0, dur + 1, step, dtype=np.int64)
    dense = rasterize(track, times_dense, cfg)
    events = simulate_events(
        FrameSequence(cfg.width, cfg.height, times_dense, dense, validate=False),
        SimConfig(contrast_threshold=cfg.contrast_threshold))
    if cfg.noise_rate_hz > 0:
        # sensor background activity: spatially and temporally uniform spikes
        # of random polarity, independent of the scene content
        n_noise = int(round(cfg.noise_rate_hz * cfg.width * cfg.height
                            * dur / 1e6))
        nrng = np.random.Generator(np.random.PCG64(rng.next_u64()))
        nt = nrng.integers(0, dur + 1, n_noise)
        nx = nrng.integers(0, cfg.width, n_noise)
        ny = nrng.integers(0, cfg.height, n_noise)
        npol = nrng.choice(np.array([-1, 1], np.int64), n_noise)
        events = EventStream(
            cfg.width, cfg.height,
            np.concatenate([events.t, nt]), np.concatenate([events.x, nx]),
            np.concatenate([events.y, ny]), np.concatenate([events.p, npol]),
            validate=False).sorted_canonical()

    frame_times = np.linspace(0, dur, cfg.n_frames).astype(np.int64)
    frames = FrameSequence(cfg.width, cfg.height, frame_times,
                           rasterize(track, frame_times, cfg))

    bbox, interval = _track_annotation(track, cfg)
    ann = SceneAnnotation(scene_id, bbox, interval)
    dt_norm = (t1v - t0v) / dur
    descriptor = np.array([
        (bbox[0] + bbox[2]) / 2, (bbox[1] + bbox[3]) / 2,
        bbox[2] - bbox[0], bbox[3] - bbox[1],
        interval[0], interval[1],
        (track.x_end - track.x_start) / cfg.width / dt_norm,
        (track.y_end - track.y_start) / cfg.height / dt_norm,
    ], dtype=np.float32)
    return SyntheticScene(scene_id, frames, events, ann, track, descriptor)


def save_scenes(scenes, out_dir) -> None:
    """One subdirectory per scene: frames.frm (+PGMs), events.evt, ann.ann,
    desc.txt (the 8-value descriptor used by the content-alignment stages)."""
    import os

    from .io_formats import write_annotations, write_events, write_frames
    os.makedirs(out_dir, exist_ok=True)
    for scene in scenes:
        sub = os.path.join(out_dir, f"scene_{scene.scene_id:05d}")
        os.makedirs(sub, exist_ok=True)
        write_frames(scene.frames, os.path.join(sub, "frames.frm"))
        write_events(scene.events, os.path.join(sub, "events.evt"))
        write_annotations([scene.annotation], os.path.join(sub, "ann.ann"))
        with open(os.path.join(sub, "desc.txt"), "w", encoding="ascii") as f:
            f.write(" ".join("%.17g" % v for v in scene.descriptor) + "\n")


def load_scenes(data_dir):
    """Read back a directory written by save_scenes, sorted by scene id."""
    import os

    from .errors import MalformedHeader
    from .io_formats import read_annotations, read_events, read_frames
    if not os.path.isdir(data_dir):
        raise BadConfig(f"not a dataset directory: {data_dir}")
    scenes = []
    for name in sorted(os.listdir(data_dir)):
        sub = os.path.join(data_dir, name)
        if not (name.startswith("scene_") and os.path.isdir(sub)):
            continue
        frames = read_frames(os.path.join(sub, "frames.frm"))
        events = read_events(os.path.join(sub, "events.evt"))
        anns = read_annotations(os.path.join(sub, "ann.ann"))
        if len(anns) != 1:
            raise MalformedHeader(f"{sub}: expected exactly one annotation")
        with open(os.path.join(sub, "desc.txt"), "r", encoding="ascii") as f:
            descriptor = np.array([float(v) for v in f.read().split()],
                                  dtype=np.float32)
        scenes.append(SyntheticScene(anns[0].query_id, frames, events, anns[0],
                                     track=None, descriptor=descriptor))
    return scenes


def gen_dataset(n: int, seed: int, cfg: GenConfig = GenConfig(), workers: int = 1):
    """Deterministic list of n scenes; identical output for identical seeds
    regardless of worker count (scenes are independently seeded)."""
    if n < 0:
        raise BadConfig("n must be >= 0")
    if workers <= 1 or n <= 1:
        return [gen_scene(i, seed, cfg) for i in range(n)]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(gen_scene, range(n), [seed] * n, [cfg] * n,
                             chunksize=max(1, n // (4 * workers))))
