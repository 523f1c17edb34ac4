import numpy as np
import pytest

from stfuse.errors import BadConfig, InvalidBox
from stfuse.grounding import (GenConfig, gen_dataset, gen_scene, ground,
                              grounding_loss, init_grounding_head, rasterize,
                              s_iou, t_iou, track_positions)
from stfuse.nn_core import Tensor, XorShift64Star, grad_check


# -- metrics --

def test_s_iou_identity():
    assert s_iou((0.1, 0.2, 0.5, 0.6), (0.1, 0.2, 0.5, 0.6)) == 1.0


def test_s_iou_disjoint():
    assert s_iou((0.0, 0.0, 0.2, 0.2), (0.5, 0.5, 0.9, 0.9)) == 0.0


def test_s_iou_one_third():
    got = s_iou((0.0, 0.0, 1.0, 1.0), (0.5, 0.0, 1.5, 1.0))
    assert abs(got - 1.0 / 3.0) < 1e-9


def test_t_iou_identity():
    assert t_iou((0.2, 0.8), (0.2, 0.8)) == 1.0


def test_t_iou_touching_is_zero():
    assert t_iou((0.0, 0.5), (0.5, 1.0)) == 0.0


def test_t_iou_one_third():
    assert abs(t_iou((0.0, 0.6), (0.3, 0.9)) - 1.0 / 3.0) < 1e-9


def test_iou_symmetry_and_bounds():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x1, y1 = rng.uniform(0, 0.5, 2)
        a = (x1, y1, x1 + rng.uniform(0.05, 0.5), y1 + rng.uniform(0.05, 0.5))
        x1, y1 = rng.uniform(0, 0.5, 2)
        b = (x1, y1, x1 + rng.uniform(0.05, 0.5), y1 + rng.uniform(0.05, 0.5))
        v, w = s_iou(a, b), s_iou(b, a)
        assert v == w and 0.0 <= v <= 1.0
    for _ in range(100):
        t0 = rng.uniform(0, 0.5)
        a = (t0, t0 + rng.uniform(0.05, 0.5))
        t0 = rng.uniform(0, 0.5)
        b = (t0, t0 + rng.uniform(0.05, 0.5))
        v, w = t_iou(a, b), t_iou(b, a)
        assert v == w and 0.0 <= v <= 1.0


def test_iou_invalid_box():
    with pytest.raises(InvalidBox):
        s_iou((0.5, 0.0, 0.2, 1.0), (0.0, 0.0, 1.0, 1.0))
    with pytest.raises(InvalidBox):
        t_iou((0.9, 0.1), (0.0, 1.0))


# -- head --

def test_ground_zero_params_center_box():
    head = init_grounding_head(XorShift64Star(0), 8)
    for tns in (head.out_p, head.b_p, head.out_t, head.b_t):
        tns.data[...] = 0.0
    tokens = Tensor(np.random.default_rng(1).standard_normal((5, 8)).astype(np.float32))
    box, interval = ground(tokens, head)
    # sigmoid(0) = 0.5 on every output coordinate
    assert np.allclose(box.data, 0.5)
    assert np.allclose(interval.data, 0.5)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_ground_single_token_pools_to_it():
    # with one token the attention pool is that token, so the head is a
    # plain sigmoid(linear) readout we can reproduce in numpy
    head = init_grounding_head(XorShift64Star(2), 8)
    tok = np.random.default_rng(3).standard_normal((1, 8)).astype(np.float64)
    box, interval = ground(Tensor(tok), head)
    raw_p = _sigmoid(tok @ head.out_p.data + head.b_p.data).reshape(4)
    raw_t = _sigmoid(tok @ head.out_t.data + head.b_t.data).reshape(2)
    want_box = [min(raw_p[0], raw_p[2]), min(raw_p[1], raw_p[3]),
                max(raw_p[0], raw_p[2]), max(raw_p[1], raw_p[3])]
    assert np.allclose(box.data, want_box, atol=1e-6)
    assert np.allclose(interval.data, sorted(raw_t), atol=1e-6)


def test_ground_outputs_ordered_and_bounded():
    rng = np.random.default_rng(4)
    head = init_grounding_head(XorShift64Star(5), 16)
    for _ in range(20):
        toks = Tensor(rng.standard_normal((7, 16)).astype(np.float32) * 3)
        box, interval = ground(toks, head)
        x1, y1, x2, y2 = box.data
        assert 0.0 <= x1 <= x2 <= 1.0 and 0.0 <= y1 <= y2 <= 1.0
        t0, t1 = interval.data
        assert 0.0 <= t0 <= t1 <= 1.0


def test_ground_grad_check():
    head = init_grounding_head(XorShift64Star(6), 6)
    toks = Tensor(np.random.default_rng(7).standard_normal((4, 6)), requires_grad=True)
    for p in (head.pool, head.out_p, head.b_p, head.out_t, head.b_t):
        p.data = p.data.astype(np.float64)

    def f(t):
        box, interval = ground(t, head)
        return (box * Tensor(np.array([1.0, -2.0, 0.5, 3.0]))).sum() + interval.sum()

    rep = grad_check(f, [toks], tol=1e-4)
    assert rep.passed, f"worst rel err {rep.max_rel_err:.2e}"


# -- loss --

def _ann(bbox, interval):
    from stfuse.io_formats import SceneAnnotation
    return SceneAnnotation(0, bbox, interval)


def test_loss_zero_iff_exact():
    ann = _ann((0.2, 0.3, 0.6, 0.7), (0.1, 0.8))
    exact = grounding_loss(Tensor(np.array(ann.bbox, np.float64)),
                           Tensor(np.array(ann.interval, np.float64)), ann)
    assert abs(float(exact.data)) < 1e-6
    off = grounding_loss(Tensor(np.array([0.2, 0.3, 0.6, 0.75])),
                         Tensor(np.array(ann.interval, np.float32)), ann)
    assert float(off.data) > 1e-3


def test_loss_monotone_along_line():
    # sliding a correct-size box away from the target increases the loss
    ann = _ann((0.4, 0.4, 0.6, 0.6), (0.3, 0.7))
    prev = -1.0
    for shift in np.linspace(0.0, 0.35, 8):
        box = Tensor(np.array([0.4 + shift, 0.4, 0.6 + shift, 0.6]))
        val = float(grounding_loss(box, Tensor(np.array([0.3, 0.7])), ann).data)
        assert val > prev
        prev = val


def test_loss_disjoint_has_useful_gradient():
    # even with zero overlap the gradient pulls the box toward the target
    ann = _ann((0.1, 0.1, 0.3, 0.3), (0.2, 0.4))
    box = Tensor(np.array([0.7, 0.7, 0.9, 0.9]), requires_grad=True)
    itv = Tensor(np.array([0.6, 0.8]), requires_grad=True)
    grounding_loss(box, itv, ann).backward()
    assert np.all(np.isfinite(box.grad)) and np.any(box.grad != 0)
    assert box.grad[0] > 0 and box.grad[2] > 0  # move x coords left
    # interval gradient is finite too (sign of the far edge can go either
    # way: the hull penalty rewards stretching toward the target)
    assert np.all(np.isfinite(itv.grad)) and np.any(itv.grad != 0)


def test_loss_grad_check():
    ann = _ann((0.25, 0.35, 0.55, 0.75), (0.2, 0.6))
    box = Tensor(np.array([0.3, 0.3, 0.7, 0.65]), requires_grad=True)
    itv = Tensor(np.array([0.15, 0.7]), requires_grad=True)
    rep = grad_check(lambda b, t: grounding_loss(b, t, ann), [box, itv],
                     tol=1e-4)
    assert rep.passed, f"worst rel err {rep.max_rel_err:.2e}"


# -- generator --

def test_gen_scene_deterministic():
    cfg = GenConfig()
    a = gen_scene(3, 42, cfg)
    b = gen_scene(3, 42, cfg)
    assert np.array_equal(a.frames.pixels, b.frames.pixels)
    assert a.events == b.events
    assert a.annotation.bbox == b.annotation.bbox
    assert np.array_equal(a.descriptor, b.descriptor)
    c = gen_scene(3, 43, cfg)
    assert not np.array_equal(a.frames.pixels, c.frames.pixels)


def test_gen_scene_annotation_matches_pixels():
    # the annotated box should cover the bright pixels averaged over time
    cfg = GenConfig()
    scene = gen_scene(11, 0, cfg)
    times = np.arange(0, cfg.duration_us + 1, cfg.internal_step_us, dtype=np.int64)
    dense = rasterize(scene.track, times, cfg)
    bright = dense > (cfg.background + cfg.foreground) / 2
    vis = bright.any(axis=(1, 2))
    xs, ys, x2s, y2s = [], [], [], []
    for f in np.where(vis)[0]:
        yy, xx = np.where(bright[f])
        xs.append(xx.min()); ys.append(yy.min())
        x2s.append(xx.max() + 1); y2s.append(yy.max() + 1)
    want = (np.mean(xs) / cfg.width, np.mean(ys) / cfg.height,
            np.mean(x2s) / cfg.width, np.mean(y2s) / cfg.height)
    assert np.allclose(scene.annotation.bbox, want, atol=1e-9)
    t0v, t1v = scene.track.t_visible
    assert scene.annotation.interval == (t0v / cfg.duration_us,
                                         t1v / cfg.duration_us)


def test_gen_scene_descriptor_consistent():
    cfg = GenConfig()
    scene = gen_scene(7, 1, cfg)
    d = scene.descriptor
    x1, y1, x2, y2 = scene.annotation.bbox
    assert abs(d[0] - (x1 + x2) / 2) < 1e-6 and abs(d[1] - (y1 + y2) / 2) < 1e-6
    assert abs(d[2] - (x2 - x1)) < 1e-6 and abs(d[3] - (y2 - y1)) < 1e-6
    assert (d[4], d[5]) == scene.annotation.interval
    # velocity in normalized units per normalized visible time
    dt = d[5] - d[4]
    assert abs(d[6] * dt * cfg.width
               - (scene.track.x_end - scene.track.x_start)) < 1e-3 * cfg.width


def test_gen_scene_events_inside_visible_window():
    # with sensor noise off, nothing changes outside the square's visible
    # interval, so no events fire there
    cfg = GenConfig(noise_rate_hz=0.0)
    for sid in range(5):
        scene = gen_scene(sid, 5, cfg)
        t0v, t1v = scene.track.t_visible
        assert len(scene.events) > 0
        # crossings land inside the step segments that straddle pop-in/out
        assert scene.events.t.min() > t0v - cfg.internal_step_us
        assert scene.events.t.max() <= t1v + cfg.internal_step_us


def test_gen_scene_noise_events():
    cfg = GenConfig(noise_rate_hz=2.0)
    clean = gen_scene(2, 8, GenConfig(noise_rate_hz=0.0))
    noisy = gen_scene(2, 8, cfg)
    expected = cfg.noise_rate_hz * cfg.width * cfg.height * cfg.duration_us / 1e6
    assert len(noisy.events) == len(clean.events) + int(round(expected))
    # noise spans the whole recording, not just the visible window
    t0v, t1v = noisy.track.t_visible
    assert noisy.events.t.min() < t0v or noisy.events.t.max() > t1v + 1000
    again = gen_scene(2, 8, cfg)
    assert noisy.events == again.events


def test_track_positions_endpoints():
    from stfuse.grounding import SquareTrack
    cfg = GenConfig()
    tr = SquareTrack(10, 4.0, 6.0, 20.0, 30.0, (500_000, 1_500_000))
    times = np.array([0, 500_000, 1_000_000, 1_499_000, 1_500_000], np.int64)
    vis, xs, ys = track_positions(tr, times, cfg)
    assert list(vis) == [False, True, True, True, False]
    assert xs[0] == 4 and ys[0] == 6
    assert xs[1] == 12 and ys[1] == 18  # midpoint


def test_gen_dataset_roundtrip(tmp_path):
    from stfuse.grounding import load_scenes, save_scenes
    scenes = gen_dataset(4, 9)
    save_scenes(scenes, tmp_path / "ds")
    back = load_scenes(tmp_path / "ds")
    assert len(back) == 4
    for a, b in zip(scenes, back):
        assert a.scene_id == b.scene_id
        assert np.allclose(a.frames.pixels, b.frames.pixels, atol=1 / 254)
        assert a.events == b.events
        assert np.allclose(a.annotation.bbox, b.annotation.bbox)
        assert np.allclose(a.annotation.interval, b.annotation.interval)
        assert np.allclose(a.descriptor, b.descriptor)


def test_gen_dataset_negative_n():
    with pytest.raises(BadConfig):
        gen_dataset(-1, 0)


def test_gen_config_validation():
    with pytest.raises(BadConfig):
        GenConfig(duration_us=2_000_001)
    with pytest.raises(BadConfig):
        GenConfig(background=0.9, foreground=0.1)
    with pytest.raises(BadConfig):
        GenConfig(min_size=40, max_size=70)
