"""Model assembly and the four-stage training schedule.

Stages (trainable parameter groups in brackets):
  S1 content alignment      [projector], coordinate token forced to zero
  S2 fusion and matching    [fusion_spatial, fusion_temporal, matching]
  S3 coordinate alignment   [coord, matching, head]
  S4 instruction fine-tune  [everything except frame_encoder]

S1/S2 use a descriptor-regression objective (stand-in for caption
alignment); S3/S4 use the grounding loss. Optimizer is SGD with momentum
0.9; parameter groups outside a stage's trainable set stay bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .alignment import (CoordinateQuery, coord_token, embed_coordinates,
                        init_align_params, project_tokens)
from .encoders import encode_events, encode_frames, init_encoder_params, st_map, voxelize
from .errors import BadConfig, ShapeMismatch, UnknownGroup
from .fusion import (cross_attn_spatial, cross_attn_temporal, init_fusion_params,
                     self_attn_match)
from .grounding import ground, grounding_loss, init_grounding_head, s_iou, t_iou
from .io_formats import load_checkpoint, save_checkpoint
from .nn_core import Tensor, XorShift64Star

ALL_GROUPS = ("frame_encoder", "event_encoder", "fusion_spatial",
              "fusion_temporal", "matching", "projector", "coord", "head")
ENCODER_GROUPS = {"frame_encoder", "event_encoder"}
FUSION_GROUPS = {"fusion_spatial", "fusion_temporal", "matching"}
VISION_INPUTS = ("frame", "event", "frame+event")


@dataclass(frozen=True)
class ModelConfig:
    seed: int = 1234
    image: int = 64
    patch: int = 8
    d: int = 64
    d_tok: int = 64
    depth: int = 2
    bins: int = 32
    alpha0: float = 0.1


@dataclass(frozen=True)
class AblationConfig:
    use_spatial_cattn: bool = True
    use_temporal_cattn: bool = True
    use_matching: bool = True
    vision_input: str = "frame+event"
    use_coord_embedding: bool = True

    def __post_init__(self):
        if self.vision_input not in VISION_INPUTS:
            raise BadConfig(f"vision_input must be one of {VISION_INPUTS}")


@dataclass(frozen=True)
class StagePlan:
    stage: str
    trainable: tuple
    objective: str  # "descriptor" | "grounding"
    epochs: int
    lr: float
    batch_size: int = 8


@dataclass(frozen=True)
class TrainSettings:
    epochs_s1: int = 3
    epochs_s2: int = 3
    epochs_s3: int = 8
    epochs_s4: int = 1
    lr_s1: float = 0.05
    lr_s2: float = 0.05
    lr_s3: float = 0.05
    lr_s4: float = 0.01
    batch_size: int = 8


def default_plans(settings: TrainSettings = TrainSettings()):
    s = settings
    return [
        StagePlan("S1", ("projector",), "descriptor", s.epochs_s1, s.lr_s1, s.batch_size),
        StagePlan("S2", ("fusion_spatial", "fusion_temporal", "matching"),
                  "descriptor", s.epochs_s2, s.lr_s2, s.batch_size),
        StagePlan("S3", ("coord", "matching", "head"),
                  "grounding", s.epochs_s3, s.lr_s3, s.batch_size),
        StagePlan("S4", tuple(g for g in ALL_GROUPS if g != "frame_encoder"),
                  "grounding", s.epochs_s4, s.lr_s4, s.batch_size),
    ]


def make_query(annotation) -> CoordinateQuery:
    """Grounding task for a scene: even query ids get the interval (spatial
    grounding), odd ids get the bbox (temporal grounding); the model always
    predicts both halves."""
    if annotation.query_id % 2 == 0:
        return CoordinateQuery(t=annotation.interval, mask_t=True)
    return CoordinateQuery(p=annotation.bbox, mask_p=True)


class Model:
    """All parameters plus the forward path from a scene to a grounding
    prediction."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = XorShift64Star(cfg.seed)
        self.frame_encoder = init_encoder_params(
            rng, cfg.image, cfg.image, cfg.patch, cfg.d, cfg.depth, in_channels=1)
        self.event_encoder = init_encoder_params(
            rng, cfg.image, cfg.image, cfg.patch, cfg.d, cfg.depth, in_channels=2)
        self.fusion = init_fusion_params(rng, cfg.d)
        self.align = init_align_params(rng, cfg.d, cfg.d_tok, alpha0=cfg.alpha0)
        self.head = init_grounding_head(rng, cfg.d_tok)

    # -- parameter registry --

    def groups(self) -> dict:
        return {
            "frame_encoder": self.frame_encoder.named("frame_encoder"),
            "event_encoder": self.event_encoder.named("event_encoder"),
            "fusion_spatial": self.fusion.spatial.named("fusion_spatial"),
            "fusion_temporal": self.fusion.temporal.named("fusion_temporal"),
            "matching": self.fusion.matching.named("matching"),
            "projector": self.align.projector.named("projector"),
            "coord": {"coord.w_p": self.align.w_p, "coord.w_t": self.align.w_t,
                      "coord.alpha": self.align.alpha},
            "head": self.head.named("head"),
        }

    def parameters(self) -> dict:
        out = {}
        for named in self.groups().values():
            out.update(named)
        return out

    def state(self) -> dict:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state(self, state: dict) -> None:
        params = self.parameters()
        for name, t in params.items():
            if name not in state:
                raise BadConfig(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=t.data.dtype).reshape(t.data.shape)
            t.data = arr.copy()

    def save(self, path) -> None:
        state = self.state()
        c = self.cfg
        state["meta.config"] = np.array(
            [c.seed, c.image, c.patch, c.d, c.d_tok, c.depth, c.bins, c.alpha0],
            dtype=np.float32)
        save_checkpoint(state, path)

    @classmethod
    def load(cls, path) -> "Model":
        state = load_checkpoint(path)
        try:
            meta = state.pop("meta.config")
        except KeyError:
            raise BadConfig(f"{path}: not a model checkpoint (no meta.config)")
        cfg = ModelConfig(seed=int(meta[0]), image=int(meta[1]), patch=int(meta[2]),
                          d=int(meta[3]), d_tok=int(meta[4]), depth=int(meta[5]),
                          bins=int(meta[6]), alpha0=float(meta[7]))
        model = cls(cfg)
        model.load_state(state)
        return model

    # -- forward path --

    def st_tokens(self, scene):
        """Encode one scene into (f_vs, f_vt, f_es, f_et)."""
        fv = encode_frames(scene.frames, self.frame_encoder)
        t1 = int(scene.frames.timestamps[-1]) + 1
        grid = voxelize(scene.events, self.cfg.bins, 0, t1)
        fe = encode_events(grid, self.event_encoder)
        f_vs, f_vt = st_map(fv)
        f_es, f_et = st_map(fe)
        return f_vs, f_vt, f_es, f_et

    def fuse(self, tokens, ablation: AblationConfig):
        """Hierarchical fusion honoring ablation switches; disabled paths pass
        the primary branch through unchanged."""
        f_vs, f_vt, f_es, f_et = tokens
        if ablation.vision_input == "frame":
            f_es = Tensor(np.zeros_like(f_es.data))
            f_et = Tensor(np.zeros_like(f_et.data))
        elif ablation.vision_input == "event":
            f_vs = Tensor(np.zeros_like(f_vs.data))
            f_vt = Tensor(np.zeros_like(f_vt.data))

        if ablation.vision_input == "event":
            f_s = f_es
        elif not ablation.use_spatial_cattn:
            f_s = f_vs
        else:
            f_s = cross_attn_spatial(f_vs, f_es, self.fusion.spatial)

        if ablation.vision_input == "frame":
            f_t = f_vt
        elif not ablation.use_temporal_cattn:
            f_t = f_et
        else:
            f_t = cross_attn_temporal(f_et, f_vt, self.fusion.temporal)

        if ablation.use_matching:
            return self_attn_match(f_s, f_t, self.fusion.matching)
        return nn.concat([f_s, f_t], axis=0)

    def visual_tokens(self, f_st):
        return project_tokens(f_st, self.align.projector)

    def aligned_tokens(self, v_st, query, ablation: AblationConfig,
                       zero_coord=False):
        if zero_coord or query is None or not ablation.use_coord_embedding:
            return v_st
        return embed_coordinates(v_st, coord_token(query, self.align),
                                 self.align.alpha)

    def predict(self, scene, query, ablation: AblationConfig,
                st_cache=None, fst_cache=None, zero_coord=False):
        """Full forward; optional caches hold detached intermediate tokens
        for stages whose upstream parameters are frozen."""
        if fst_cache is not None:
            if scene.scene_id not in fst_cache:
                f_st = self.fuse(self.st_tokens(scene), ablation)
                fst_cache[scene.scene_id] = Tensor(f_st.data.copy())
            f_st = fst_cache[scene.scene_id]
        else:
            if st_cache is not None:
                if scene.scene_id not in st_cache:
                    st_cache[scene.scene_id] = tuple(
                        Tensor(t.data.copy()) for t in self.st_tokens(scene))
                tokens = st_cache[scene.scene_id]
            else:
                tokens = self.st_tokens(scene)
            f_st = self.fuse(tokens, ablation)
        v_st = self.visual_tokens(f_st)
        tokens = self.aligned_tokens(v_st, query, ablation, zero_coord=zero_coord)
        return ground(tokens, self.head)


# --------------------------------------------------------------------------
# objectives

def descriptor_target(descriptor: np.ndarray, d_tok: int) -> np.ndarray:
    out = np.zeros(d_tok, dtype=np.float32)
    out[:len(descriptor)] = descriptor
    return out


def stage_objective(model: Model, plan: StagePlan, scene,
                    ablation: AblationConfig, st_cache=None, fst_cache=None):
    """Differentiable scalar loss for one scene under the stage's task."""
    if plan.objective == "descriptor":
        if fst_cache is not None:
            if scene.scene_id not in fst_cache:
                f_st = model.fuse(model.st_tokens(scene), ablation)
                fst_cache[scene.scene_id] = Tensor(f_st.data.copy())
            f_st = fst_cache[scene.scene_id]
        else:
            if st_cache is not None:
                if scene.scene_id not in st_cache:
                    st_cache[scene.scene_id] = tuple(
                        Tensor(t.data.copy()) for t in model.st_tokens(scene))
                f_st = model.fuse(st_cache[scene.scene_id], ablation)
            else:
                f_st = model.fuse(model.st_tokens(scene), ablation)
        pooled = model.visual_tokens(f_st).mean(axis=0)
        target = Tensor(descriptor_target(scene.descriptor, model.cfg.d_tok))
        diff = pooled - target
        return (diff * diff).mean()
    if plan.objective == "grounding":
        box, interval = model.predict(scene, make_query(scene.annotation), ablation,
                                      st_cache=st_cache, fst_cache=fst_cache)
        return grounding_loss(box, interval, scene.annotation)
    raise BadConfig(f"unknown objective {plan.objective!r}")


# --------------------------------------------------------------------------
# training

def run_stage(model: Model, plan: StagePlan, scenes, ablation: AblationConfig,
              seed: int = 0, log=None):
    """One training stage; returns per-epoch mean losses. Parameters outside
    plan.trainable are bit-identical before and after."""
    groups = model.groups()
    unknown = set(plan.trainable) - set(groups)
    if unknown:
        raise UnknownGroup(f"unknown parameter groups: {sorted(unknown)}")
    trainable = {}
    for g in plan.trainable:
        trainable.update(groups[g])
    all_params = model.parameters()

    encoders_frozen = not (set(plan.trainable) & ENCODER_GROUPS)
    upstream_frozen = encoders_frozen and not (set(plan.trainable) & FUSION_GROUPS)
    st_cache = {} if encoders_frozen and not upstream_frozen else None
    fst_cache = {} if upstream_frozen else None

    velocity = {name: np.zeros_like(t.data) for name, t in trainable.items()}
    stage_tag = sum(ord(c) << (8 * i) for i, c in enumerate(plan.stage))
    rng = XorShift64Star((seed << 24) ^ stage_tag ^ 0xA5A5)
    order = list(range(len(scenes)))
    epoch_losses = []
    for _ in range(plan.epochs):
        rng.shuffle(order)
        total = 0.0
        for start in range(0, len(order), plan.batch_size):
            batch = order[start:start + plan.batch_size]
            for t in all_params.values():
                t.zero_grad()
            inv = 1.0 / len(batch)
            for idx in batch:
                loss = stage_objective(model, plan, scenes[idx], ablation,
                                       st_cache=st_cache, fst_cache=fst_cache)
                total += float(loss.data)
                (loss * inv).backward()
            for name, t in trainable.items():
                g = t.grad if t.grad is not None else np.zeros_like(t.data)
                v = velocity[name]
                v *= 0.9
                v -= plan.lr * g
                t.data = t.data + v
        epoch_losses.append(total / len(scenes))
        if log is not None:
            log(f"{plan.stage} epoch loss {epoch_losses[-1]:.6f}")
    for t in all_params.values():
        t.zero_grad()
    return epoch_losses


def run_training(model: Model, scenes, plans=None,
                 ablation: AblationConfig = AblationConfig(), log=None):
    """Run the staged schedule in order; returns {stage: epoch losses}."""
    if plans is None:
        plans = default_plans()
    history = {}
    for plan in plans:
        history[plan.stage] = run_stage(model, plan, scenes, ablation,
                                        seed=model.cfg.seed, log=log)
    return history


# --------------------------------------------------------------------------
# evaluation

@dataclass
class EvalRow:
    scene_id: int
    s_iou: float
    t_iou: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    @property
    def mean_s_iou(self):
        return float(np.mean([r.s_iou for r in self.rows])) if self.rows else 0.0

    @property
    def mean_t_iou(self):
        return float(np.mean([r.t_iou for r in self.rows])) if self.rows else 0.0

    def write(self, path):
        with open(path, "w", encoding="ascii") as f:
            f.write(f"mean_s_iou {self.mean_s_iou:.6f}\n")
            f.write(f"mean_t_iou {self.mean_t_iou:.6f}\n")
            for r in self.rows:
                f.write(f"{r.scene_id} {r.s_iou:.6f} {r.t_iou:.6f}\n")


def evaluate(model: Model, scenes, ablation: AblationConfig = AblationConfig()) -> EvalReport:
    report = EvalReport()
    for scene in scenes:
        box, interval = model.predict(scene, make_query(scene.annotation), ablation)
        bb = tuple(float(v) for v in box.data)
        iv = tuple(float(v) for v in interval.data)
        report.rows.append(EvalRow(scene.scene_id,
                                   s_iou(bb, scene.annotation.bbox),
                                   t_iou(iv, scene.annotation.interval)))
    return report


def run_ablation(ablation: AblationConfig, train_scenes, eval_scenes,
                 model_cfg: ModelConfig = ModelConfig(),
                 settings: TrainSettings = TrainSettings(), log=None):
    """Train a fresh model under one ablation configuration and evaluate it;
    rows are comparable across configurations at a fixed seed and data."""
    model = Model(model_cfg)
    run_training(model, train_scenes, default_plans(settings), ablation, log=log)
    return model, evaluate(model, eval_scenes, ablation)
