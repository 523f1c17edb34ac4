import numpy as np
import pytest

from stfuse.errors import (BadConfig, BadMagic, DuplicateName, DimensionMismatch,
                           NonMonotonicTime, OutOfBounds, TruncatedFile)
from stfuse.io_formats import (EventStream, FrameSequence, SceneAnnotation,
                               load_checkpoint, parse_config, read_annotations,
                               read_events, read_frames, read_pgm,
                               save_checkpoint, write_annotations, write_events,
                               write_frames, write_pgm)


def rand_stream(rng, n=50, w=16, h=12):
    t = np.sort(rng.integers(0, 10000, size=n))
    return EventStream(w, h, t,
                       rng.integers(0, w, size=n),
                       rng.integers(0, h, size=n),
                       rng.choice([-1, 1], size=n))


# -- events --

def test_event_parse_single_line(tmp_path):
    p = tmp_path / "e.evt"
    p.write_text("EVT1 2 2\n5 0 1 1\n")
    s = read_events(p)
    assert s.width == 2 and s.height == 2
    ev = list(s)
    assert len(ev) == 1
    e = ev[0]
    assert (e.t, e.x, e.y, e.p) == (5, 0, 1, 1)


def test_event_empty_body(tmp_path):
    p = tmp_path / "e.evt"
    p.write_text("EVT1 4 4\n")
    assert len(read_events(p)) == 0


def test_event_out_of_bounds(tmp_path):
    p = tmp_path / "e.evt"
    p.write_text("EVT1 2 2\n5 2 0 1\n")
    with pytest.raises(OutOfBounds):
        read_events(p)


def test_event_bad_header(tmp_path):
    p = tmp_path / "e.evt"
    p.write_text("EVTX 2 2\n")
    with pytest.raises(Exception):
        read_events(p)


def test_event_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(20):
        s = rand_stream(rng)
        p = tmp_path / f"r{i}.evt"
        write_events(s, p)
        assert read_events(p) == s


def test_event_nonmonotonic_rejected():
    with pytest.raises(NonMonotonicTime):
        EventStream(4, 4, [5, 3], [0, 0], [0, 0], [1, 1])


def test_event_canonical_sort():
    s = EventStream(4, 4, [5, 5, 5], [2, 1, 1], [0, 0, 0], [1, -1, 1],
                    validate=False)
    c = s.sorted_canonical()
    assert list(c.x) == [1, 1, 2]
    assert list(c.p) == [-1, 1, 1]


# -- frames / PGM --

def test_pgm_255_maps_to_one(tmp_path):
    p = tmp_path / "f.pgm"
    write_pgm(p, np.array([[1.0]], dtype=np.float32))
    img = read_pgm(p)
    assert img[0, 0] == 1.0


def test_pgm_128(tmp_path):
    p = tmp_path / "f.pgm"
    write_pgm(p, np.array([[128 / 255]], dtype=np.float32))
    assert abs(read_pgm(p)[0, 0] - 128 / 255) < 1e-9


def test_frames_equal_timestamps_rejected():
    px = np.zeros((2, 2, 2), dtype=np.float32)
    with pytest.raises(NonMonotonicTime):
        FrameSequence(2, 2, [7, 7], px)


def test_frames_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(10):
        T = int(rng.integers(1, 6))
        ts = np.sort(rng.choice(np.arange(10000), size=T, replace=False))
        px = (rng.integers(0, 256, size=(T, 5, 7)) / 255.0).astype(np.float32)
        fr = FrameSequence(7, 5, ts, px)
        mp = tmp_path / f"s{i}.frm"
        write_frames(fr, mp)
        back = read_frames(mp)
        assert np.array_equal(back.timestamps, fr.timestamps)
        assert np.array_equal(back.pixels, fr.pixels)


# -- annotations --

def test_annotation_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    anns = []
    for i in range(30):
        x1, y1 = rng.uniform(0, 0.4, 2)
        t0 = rng.uniform(0, 0.4)
        anns.append(SceneAnnotation(i, (x1, y1, x1 + 0.3, y1 + 0.3),
                                    (t0, t0 + 0.5)))
    p = tmp_path / "a.ann"
    write_annotations(anns, p)
    back = read_annotations(p)
    assert len(back) == len(anns)
    for a, b in zip(anns, back):
        assert a.query_id == b.query_id
        assert a.bbox == b.bbox and a.interval == b.interval


def test_annotation_validation():
    with pytest.raises(OutOfBounds):
        SceneAnnotation(0, (0.5, 0.1, 0.2, 0.4), (0.1, 0.9))
    with pytest.raises(OutOfBounds):
        SceneAnnotation(0, (0.1, 0.1, 0.2, 0.4), (0.1, 1.9))


# -- checkpoint --

def test_checkpoint_roundtrip_bytes(tmp_path):
    p = tmp_path / "w.ckpt"
    save_checkpoint({"w": np.array([1.0, -1.0], dtype=np.float32)}, p)
    back = load_checkpoint(p)
    assert list(back) == ["w"]
    assert back["w"].dtype == np.float32
    assert np.array_equal(back["w"], [1.0, -1.0])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint({"w": np.zeros(2, dtype=np.float32)}, p)
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(BadMagic):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint({"w": np.zeros(8, dtype=np.float32)}, p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(TruncatedFile):
        load_checkpoint(p)


def test_checkpoint_duplicate_name(tmp_path):
    # duplicates cannot come from a dict, so forge the file
    p = tmp_path / "d.ckpt"
    save_checkpoint({"w": np.zeros(1, dtype=np.float32)}, p)
    raw = p.read_bytes()
    body = raw[12:]
    forged = raw[:8] + (2).to_bytes(4, "little") + body + body
    p.write_bytes(forged)
    with pytest.raises(DuplicateName):
        load_checkpoint(p)


def test_checkpoint_many_roundtrips(tmp_path):
    rng = np.random.default_rng(3)
    for i in range(25):
        params = {}
        for j in range(int(rng.integers(1, 5))):
            shape = tuple(rng.integers(1, 4, size=int(rng.integers(0, 3))))
            params[f"g{j}.w"] = rng.standard_normal(shape).astype(np.float32)
        p = tmp_path / f"c{i}.ckpt"
        save_checkpoint(params, p)
        back = load_checkpoint(p)
        assert list(back) == list(params)
        for k in params:
            assert np.array_equal(back[k], params[k])
            assert back[k].shape == params[k].shape


# -- config --

def test_config_parse_and_types(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 7\nlr_s1 = 0.05\n# comment\n\nbins = 16\n")
    cfg = parse_config(p, {"seed", "lr_s1", "bins"})
    assert cfg.get_int("seed") == 7
    assert cfg.get_float("lr_s1") == 0.05
    assert cfg.get_int("missing", 3) == 3


def test_config_unknown_key(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("nope = 1\n")
    with pytest.raises(BadConfig):
        parse_config(p, {"seed"})


def test_config_duplicate_key(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 1\nseed = 2\n")
    with pytest.raises(BadConfig):
        parse_config(p, {"seed"})


def test_config_missing_required(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("")
    cfg = parse_config(p, {"seed"})
    with pytest.raises(BadConfig):
        cfg.get_int("seed")
