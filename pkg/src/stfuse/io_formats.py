"""Readers and writers for the engine's on-disk formats.

Formats:
  * events      — ASCII, header ``EVT1 <width> <height>``, rows ``t x y p``
  * frames      — manifest ``FRM1 <width> <height>`` + binary P5 PGM files
  * annotations — ASCII, header ``ANN1``, rows ``query_id x1 y1 x2 y2 t0 t1``
  * checkpoint  — binary, magic ``LFEA``, little-endian u32 metadata,
                  float32 LE tensor payloads
  * config      — flat ``key = value`` ASCII, unknown keys rejected

All functions are pure over immutable inputs; safe to call concurrently on
distinct paths.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadConfig,
    BadMagic,
    DimensionMismatch,
    DuplicateName,
    MalformedHeader,
    NonMonotonicTime,
    OutOfBounds,
    TruncatedFile,
)

CHECKPOINT_MAGIC = b"LFEA"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Event:
    """One polarity spike: time in integer microseconds, pixel coords,
    polarity +1 (ON) or -1 (OFF)."""
    t: int
    x: int
    y: int
    p: int


class EventStream:
    """Events sorted by t (ties broken by (y, x, p) ascending), stored as
    column arrays for speed."""

    def __init__(self, width, height, t=None, x=None, y=None, p=None, validate=True):
        self.width = int(width)
        self.height = int(height)
        self.t = np.asarray(t if t is not None else [], dtype=np.int64)
        self.x = np.asarray(x if x is not None else [], dtype=np.int64)
        self.y = np.asarray(y if y is not None else [], dtype=np.int64)
        self.p = np.asarray(p if p is not None else [], dtype=np.int64)
        if validate:
            self._check()

    def _check(self):
        if self.width <= 0 or self.height <= 0:
            raise OutOfBounds(f"bad sensor size {self.width}x{self.height}")
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.p)):
            raise DimensionMismatch("event columns differ in length")
        if len(self.t) == 0:
            return
        if self.t.min() < 0:
            raise NonMonotonicTime("negative timestamp")
        if np.any(np.diff(self.t) < 0):
            raise NonMonotonicTime("event timestamps decrease")
        if (self.x.min() < 0 or self.x.max() >= self.width
                or self.y.min() < 0 or self.y.max() >= self.height):
            raise OutOfBounds("event coordinates outside sensor")
        if not np.all(np.abs(self.p) == 1):
            raise OutOfBounds("polarity must be +1 or -1")

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def sorted_canonical(self) -> "EventStream":
        """Return a copy in canonical order: t, then (y, x, p) ascending."""
        order = np.lexsort((self.p, self.x, self.y, self.t))
        return EventStream(self.width, self.height,
                           self.t[order], self.x[order], self.y[order], self.p[order])

    def __eq__(self, other):
        return (isinstance(other, EventStream)
                and self.width == other.width and self.height == other.height
                and np.array_equal(self.t, other.t) and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y) and np.array_equal(self.p, other.p))


class FrameSequence:
    """Grayscale frames at strictly increasing integer-microsecond timestamps;
    intensities in [0, 1] stored as float32 [T, H, W]."""

    def __init__(self, width, height, timestamps, pixels, validate=True):
        self.width = int(width)
        self.height = int(height)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.pixels = np.asarray(pixels, dtype=np.float32)
        if validate:
            self._check()

    def _check(self):
        if self.pixels.shape != (len(self.timestamps), self.height, self.width):
            raise DimensionMismatch(
                f"pixels {self.pixels.shape} vs {len(self.timestamps)} frames of "
                f"{self.height}x{self.width}")
        if len(self.timestamps) and np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotonicTime("frame timestamps must strictly increase")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise OutOfBounds("frame intensities outside [0, 1]")

    def __len__(self):
        return len(self.timestamps)


@dataclass(frozen=True)
class SceneAnnotation:
    """Ground truth for one grounding query: normalized bbox and interval."""
    query_id: int
    bbox: tuple  # (x1, y1, x2, y2) in [0, 1]
    interval: tuple  # (t_start, t_end) in [0, 1]

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        t0, t1 = self.interval
        vals = (x1, y1, x2, y2, t0, t1)
        if any(v < 0.0 or v > 1.0 for v in vals):
            raise OutOfBounds(f"annotation components outside [0,1]: {vals}")
        if not (x1 < x2 and y1 < y2 and t0 < t1):
            raise OutOfBounds(f"annotation ordering violated: {vals}")


# --------------------------------------------------------------------------
# events (EVT1)

def write_events(stream: EventStream, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(f"EVT1 {stream.width} {stream.height}\n")
        if len(stream):
            cols = np.stack([stream.t, stream.x, stream.y, stream.p], axis=1)
            np.savetxt(f, cols, fmt="%d")


def read_events(path) -> EventStream:
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "EVT1":
            raise MalformedHeader(f"{path}: expected 'EVT1 <width> <height>'")
        try:
            width, height = int(header[1]), int(header[2])
        except ValueError as e:
            raise MalformedHeader(f"{path}: non-integer dimensions") from e
        text = f.read()
    if not text.strip():
        return EventStream(width, height)
    try:
        body = np.loadtxt(io.StringIO(text), dtype=np.int64, ndmin=2)
    except ValueError as e:
        raise MalformedHeader(f"{path}: malformed event row: {e}") from e
    if body.shape[1] != 4:
        raise MalformedHeader(f"{path}: event rows need 4 columns")
    return EventStream(width, height, body[:, 0], body[:, 1], body[:, 2], body[:, 3])


# --------------------------------------------------------------------------
# frames (FRM1 manifest + PGM P5)

def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0,1] float image as an 8-bit binary PGM (maxval 255)."""
    h, w = image.shape
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    i = 0
    while len(fields) < 4:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":  # comment to end of line
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        if j == i:
            raise TruncatedFile(f"{path}: truncated PGM header")
        fields.append(raw[i:j])
        i = j
    if fields[0] != b"P5":
        raise MalformedHeader(f"{path}: not a binary PGM")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise MalformedHeader(f"{path}: bad PGM header") from e
    if maxval != 255:
        raise MalformedHeader(f"{path}: PGM maxval must be 255, got {maxval}")
    i += 1  # single whitespace byte after maxval
    body = raw[i:i + w * h]
    if len(body) != w * h:
        raise TruncatedFile(f"{path}: PGM body has {len(body)} of {w * h} bytes")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float32) / 255.0


def write_frames(frames: FrameSequence, manifest_path) -> None:
    """Write the manifest plus one PGM per frame next to it."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    stem = os.path.splitext(os.path.basename(manifest_path))[0]
    with open(manifest_path, "w", encoding="ascii") as f:
        f.write(f"FRM1 {frames.width} {frames.height}\n")
        for i in range(len(frames)):
            name = f"{stem}_{i:05d}.pgm"
            write_pgm(os.path.join(base, name), frames.pixels[i])
            f.write(f"{frames.timestamps[i]} {name}\n")


def read_frames(manifest_path) -> FrameSequence:
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path, "r", encoding="ascii") as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "FRM1":
            raise MalformedHeader(f"{manifest_path}: expected 'FRM1 <width> <height>'")
        try:
            width, height = int(header[1]), int(header[2])
        except ValueError as e:
            raise MalformedHeader(f"{manifest_path}: non-integer dimensions") from e
        ts, imgs = [], []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise MalformedHeader(f"{manifest_path}: bad manifest row {line!r}")
            ts.append(int(parts[0]))
            img = read_pgm(os.path.join(base, parts[1]))
            if img.shape != (height, width):
                raise DimensionMismatch(
                    f"{parts[1]}: {img.shape} does not match {height}x{width}")
            imgs.append(img)
    if len(ts) >= 2 and any(b <= a for a, b in zip(ts, ts[1:])):
        raise NonMonotonicTime(f"{manifest_path}: timestamps must strictly increase")
    pixels = np.stack(imgs) if imgs else np.zeros((0, height, width), np.float32)
    return FrameSequence(width, height, ts, pixels)


# --------------------------------------------------------------------------
# annotations (ANN1)

def write_annotations(anns, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("ANN1\n")
        for a in anns:
            vals = " ".join("%.17g" % v for v in (*a.bbox, *a.interval))
            f.write(f"{a.query_id} {vals}\n")


def read_annotations(path):
    anns = []
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().strip()
        if header != "ANN1":
            raise MalformedHeader(f"{path}: expected 'ANN1'")
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise MalformedHeader(f"{path}: annotation rows need 7 fields")
            qid = int(parts[0])
            x1, y1, x2, y2, t0, t1 = (float(v) for v in parts[1:])
            anns.append(SceneAnnotation(qid, (x1, y1, x2, y2), (t0, t1)))
    return anns


# --------------------------------------------------------------------------
# checkpoint (LFEA)

def save_checkpoint(params: dict, path) -> None:
    """params: name -> float array; stored float32 little-endian."""
    names = list(params)
    if len(set(names)) != len(names):
        raise DuplicateName("duplicate tensor name")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            arr = np.asarray(params[name], dtype="<f4")
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFile(f"{path}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        if name in out:
            raise DuplicateName(f"{path}: duplicate tensor {name!r}")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        out[name] = data.copy()
    return out


# --------------------------------------------------------------------------
# config (key = value)

@dataclass
class RunConfig:
    """Typed view over a flat key = value file; unknown keys are an error."""
    values: dict = field(default_factory=dict)

    def get_int(self, key, default=None):
        return int(self._raw(key, default))

    def get_float(self, key, default=None):
        return float(self._raw(key, default))

    def get_bool(self, key, default=None):
        v = str(self._raw(key, default)).lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise BadConfig(f"config key {key!r}: not a boolean: {v!r}")

    def get_str(self, key, default=None):
        return str(self._raw(key, default))

    def get_enum(self, key, choices, default=None):
        v = self.get_str(key, default)
        if v not in choices:
            raise BadConfig(f"config key {key!r}: {v!r} not in {sorted(choices)}")
        return v

    def _raw(self, key, default):
        if key in self.values:
            return self.values[key]
        if default is None:
            raise BadConfig(f"missing required config key {key!r}")
        return default


def parse_config(path, known_keys) -> RunConfig:
    values = {}
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise BadConfig(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known_keys:
                raise BadConfig(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise BadConfig(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = value
    return RunConfig(values)
