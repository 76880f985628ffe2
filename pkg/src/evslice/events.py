"""Event-stream data model, file formats and dense encodings.

Events are stored column-wise (x, y, t, p as numpy arrays) inside an
immutable :class:`EventStream`.  Windows are half-open, ``[t_start, t_end)``,
so that slicing a partition of a window reproduces the stream exactly.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

DEFAULT_BINS = 5

BINARY_MAGIC = b"EVT0"
_BINARY_HEADER = struct.Struct("<4sHHQ")
BINARY_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("p", "i1")])


class EventFormatError(ValueError):
    """Raised for malformed or out-of-contract event data."""


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    p: int


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events over the window ``[t0, t0 + span)``.

    Build with :meth:`from_arrays`, which validates and sorts.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t0: int
    span: int

    @classmethod
    def from_arrays(cls, x, y, t, p, width: int, height: int,
                    t0: int | None = None, span: int | None = None) -> "EventStream":
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        if not (len(x) == len(y) == len(t) == len(p)):
            raise EventFormatError("x, y, t, p must have equal length")
        if width <= 0 or height <= 0:
            raise EventFormatError(f"invalid sensor size {width}x{height}")
        if len(t) and t.min() < 0:
            raise EventFormatError("negative timestamp")
        bad = np.flatnonzero((x < 0) | (x >= width) | (y < 0) | (y >= height))
        if bad.size:
            i = int(bad[0])
            raise EventFormatError(
                f"event {i} at ({x[i]}, {y[i]}) outside sensor {width}x{height}")
        bad = np.flatnonzero((p != 1) & (p != -1))
        if bad.size:
            raise EventFormatError(f"event {int(bad[0])} has polarity {p[bad[0]]}")
        order = np.argsort(t, kind="stable")
        x, y, t, p = x[order], y[order], t[order], p[order]
        if t0 is None:
            t0 = int(t[0]) if len(t) else 0
        if span is None:
            span = int(t[-1]) - t0 + 1 if len(t) else 1
        if span <= 0:
            raise EventFormatError(f"span must be positive, got {span}")
        if len(t) and (t[0] < t0 or t[-1] > t0 + span):
            raise EventFormatError(
                f"timestamps [{t[0]}, {t[-1]}] exceed window [{t0}, {t0 + span}]")
        return cls(_frozen(x, np.int64), _frozen(y, np.int64), _frozen(t, np.int64),
                   _frozen(p, np.int64), int(width), int(height), int(t0), int(span))

    @classmethod
    def empty(cls, width: int, height: int, t0: int = 0, span: int = 1) -> "EventStream":
        return cls.from_arrays([], [], [], [], width, height, t0, span)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    @property
    def t_end(self) -> int:
        return self.t0 + self.span

    def same_events(self, other: "EventStream") -> bool:
        return (len(self) == len(other)
                and all(np.array_equal(a, b) for a, b in
                        ((self.x, other.x), (self.y, other.y),
                         (self.t, other.t), (self.p, other.p))))


# ---------------------------------------------------------------------------
# Parsing and serialization
# ---------------------------------------------------------------------------

def _map_polarity(raw: int, where: str) -> int:
    if raw in (1, -1):
        return raw
    if raw == 0:
        return -1
    raise EventFormatError(f"{where}: polarity {raw} not in {{-1, +1, 0, 1}}")


def _read_source(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    with open(source, "rb") as fh:
        return fh.read()


def parse_events(source: Union[bytes, str, os.PathLike], format: str = "csv",
                 width: int | None = None, height: int | None = None,
                 t0: int | None = None, span: int | None = None) -> EventStream:
    """Parse a CSV or packed-binary event file into a validated stream.

    ``source`` is raw bytes or a path.  CSV needs ``width``/``height`` since
    the format carries no sensor metadata; the binary header supplies them.
    Unsorted input is stably sorted by timestamp.
    """
    data = _read_source(source)
    if format == "csv":
        if width is None or height is None:
            raise EventFormatError("CSV input requires width and height")
        x, y, t, p = _parse_csv(data)
    elif format == "binary":
        width, height, (x, y, t, p) = _parse_binary(data, width, height)
    else:
        raise EventFormatError(f"unknown event format {format!r}")
    bad = np.flatnonzero((x < 0) | (x >= width) | (y < 0) | (y >= height))
    if bad.size:
        i = int(bad[0])
        where = f"line {i + 2}" if format == "csv" else f"record {i} (offset {16 + 13 * i})"
        raise EventFormatError(f"{where}: ({x[i]}, {y[i]}) outside sensor {width}x{height}")
    return EventStream.from_arrays(x, y, t, p, width, height, t0, span)


def _parse_csv(data: bytes):
    text = data.decode("utf-8")
    lines = text.splitlines()
    if not lines or [c.strip() for c in lines[0].split(",")] != ["x", "y", "t", "p"]:
        raise EventFormatError("line 1: expected header 'x,y,t,p'")
    cols: list[list[int]] = [[], [], [], []]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            xi, yi, ti, pi = (int(v) for v in parts)
        except ValueError:
            raise EventFormatError(f"line {lineno}: non-integer field in {line!r}") from None
        if xi < 0 or yi < 0 or ti < 0:
            raise EventFormatError(f"line {lineno}: negative field in {line!r}")
        cols[0].append(xi)
        cols[1].append(yi)
        cols[2].append(ti)
        cols[3].append(_map_polarity(pi, f"line {lineno}"))
    return tuple(np.asarray(c, dtype=np.int64) for c in cols)


def _parse_binary(data: bytes, width, height):
    if len(data) < _BINARY_HEADER.size:
        raise EventFormatError("offset 0: truncated header")
    magic, w, h, count = _BINARY_HEADER.unpack_from(data, 0)
    if magic != BINARY_MAGIC:
        raise EventFormatError(f"offset 0: bad magic {magic!r}")
    body = data[_BINARY_HEADER.size:]
    expected = count * BINARY_RECORD.itemsize
    if len(body) != expected:
        raise EventFormatError(
            f"offset {_BINARY_HEADER.size}: expected {expected} payload bytes for "
            f"{count} events, found {len(body)}")
    if width is not None and width != w or height is not None and height != h:
        raise EventFormatError(f"header sensor {w}x{h} disagrees with {width}x{height}")
    rec = np.frombuffer(body, dtype=BINARY_RECORD, count=count)
    p = rec["p"].astype(np.int64)
    bad = np.flatnonzero((p != 1) & (p != -1) & (p != 0))
    if bad.size:
        i = int(bad[0])
        raise EventFormatError(
            f"record {i} (offset {_BINARY_HEADER.size + i * BINARY_RECORD.itemsize}): "
            f"polarity {p[i]} not in {{-1, +1, 0, 1}}")
    p[p == 0] = -1
    if count and rec["t"].max() > np.iinfo(np.int64).max:
        raise EventFormatError("timestamp exceeds int64 range")
    return w, h, (rec["x"].astype(np.int64), rec["y"].astype(np.int64),
                  rec["t"].astype(np.int64), p)


def serialize_events(stream: EventStream, format: str = "csv") -> bytes:
    if format == "csv":
        buf = io.StringIO()
        buf.write("x,y,t,p\n")
        for xi, yi, ti, pi in zip(stream.x.tolist(), stream.y.tolist(),
                                  stream.t.tolist(), stream.p.tolist()):
            buf.write(f"{xi},{yi},{ti},{pi}\n")
        return buf.getvalue().encode("utf-8")
    if format == "binary":
        rec = np.empty(len(stream), dtype=BINARY_RECORD)
        rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
        header = _BINARY_HEADER.pack(BINARY_MAGIC, stream.width, stream.height, len(stream))
        return header + rec.tobytes()
    raise EventFormatError(f"unknown event format {format!r}")


def write_events(stream: EventStream, path, format: str | None = None) -> None:
    format = format or guess_format(path)
    with open(path, "wb") as fh:
        fh.write(serialize_events(stream, format))


def guess_format(path) -> str:
    return "binary" if str(path).endswith((".bin", ".evt")) else "csv"


# ---------------------------------------------------------------------------
# Windowing and encodings
# ---------------------------------------------------------------------------

def slice_window(stream: EventStream, t_a: int, t_b: int) -> EventStream:
    """Events with ``t_a <= t < t_b``, as a stream over that window."""
    if not t_a < t_b:
        raise ValueError(f"inverted window [{t_a}, {t_b})")
    if t_a < stream.t0 or t_b > stream.t_end:
        raise ValueError(f"window [{t_a}, {t_b}) outside [{stream.t0}, {stream.t_end}]")
    lo = np.searchsorted(stream.t, t_a, side="left")
    hi = np.searchsorted(stream.t, t_b, side="left")
    return EventStream(stream.x[lo:hi], stream.y[lo:hi], stream.t[lo:hi], stream.p[lo:hi],
                       stream.width, stream.height, int(t_a), int(t_b - t_a))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    data: np.ndarray  # (bins, H, W)
    window: tuple[int, int]

    @property
    def bins(self) -> int:
        return self.data.shape[0]

    @property
    def mass(self) -> float:
        return float(np.abs(self.data).sum())


def to_voxel_grid(stream: EventStream, window: tuple[int, int] | None = None,
                  bins: int = DEFAULT_BINS, height: int | None = None,
                  width: int | None = None, signed: bool = False) -> VoxelGrid:
    """Temporal-bilinear voxel grid.

    Bin ``k`` covers ``[t_start + k*d, t_start + (k+1)*d)`` with ``d`` the bin
    length; each event's weight is split between the two nearest bin centres.
    Events before the first centre or after the last go entirely to the edge
    bin, so the unsigned grid always holds one unit per event.  Pixel
    coordinates are rescaled when ``height``/``width`` differ from the sensor.
    """
    t_start, t_end = window if window is not None else (stream.t0, stream.t_end)
    height = stream.height if height is None else height
    width = stream.width if width is None else width
    if t_end <= t_start:
        raise ValueError(f"zero-length window [{t_start}, {t_end})")
    if bins < 1 or height < 1 or width < 1:
        raise ValueError(f"bins/height/width must be positive, got {bins}/{height}/{width}")

    grid = np.zeros((bins, height, width), dtype=np.float64)
    mask = (stream.t >= t_start) & (stream.t < t_end)
    if not mask.any():
        return VoxelGrid(grid, (int(t_start), int(t_end)))
    t = stream.t[mask].astype(np.float64)
    xs = stream.x[mask] * width // stream.width
    ys = stream.y[mask] * height // stream.height
    w = stream.p[mask].astype(np.float64) if signed else np.ones(len(t))

    pos = (t - t_start) * bins / (t_end - t_start) - 0.5
    pos = np.clip(pos, 0.0, bins - 1)
    left = np.floor(pos).astype(np.int64)
    frac = pos - left
    right = np.minimum(left + 1, bins - 1)
    np.add.at(grid, (left, ys, xs), w * (1.0 - frac))
    np.add.at(grid, (right, ys, xs), w * frac)
    return VoxelGrid(grid, (int(t_start), int(t_end)))


@dataclass(frozen=True, eq=False)
class StepFeatures:
    """Per-step slicer inputs over ``n_steps`` equal sub-intervals.

    Columns: normalized event count, polarity balance, spatial dispersion.
    """

    values: np.ndarray  # (n_steps, 3)
    t0: int
    span: int

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    def step_end(self, n: int) -> int:
        """End time (exclusive) of 1-based step ``n``.

        Chosen so that an integer timestamp lies in step ``n`` exactly when
        ``(n-1)*span <= (t - t0)*N < n*span``.
        """
        return self.t0 + -(-n * self.span // self.n_steps)


def step_index(t: np.ndarray, t0: int, span: int, n_steps: int) -> np.ndarray:
    """0-based micro-bin index of each timestamp (integer arithmetic).

    An event stamped exactly at the closing instant ``t0 + span`` is counted
    in the last step.
    """
    idx = (np.asarray(t, dtype=np.int64) - t0) * n_steps // span
    return np.minimum(idx, n_steps - 1)


def micro_bin_features(stream: EventStream, n_steps: int) -> StepFeatures:
    if n_steps < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    idx = step_index(stream.t, stream.t0, stream.span, n_steps)
    counts = np.bincount(idx, minlength=n_steps).astype(np.float64)
    pol = np.bincount(idx, weights=stream.p.astype(np.float64), minlength=n_steps)
    sx = np.bincount(idx, weights=stream.x.astype(np.float64), minlength=n_steps)
    sy = np.bincount(idx, weights=stream.y.astype(np.float64), minlength=n_steps)
    sxx = np.bincount(idx, weights=stream.x.astype(np.float64) ** 2, minlength=n_steps)
    syy = np.bincount(idx, weights=stream.y.astype(np.float64) ** 2, minlength=n_steps)

    feats = np.zeros((n_steps, 3))
    nz = counts > 0
    if nz.any():
        feats[:, 0] = counts / counts.max()
        feats[nz, 1] = pol[nz] / counts[nz]
        c = counts[nz]
        var_x = np.maximum(sxx[nz] / c - (sx[nz] / c) ** 2, 0.0)
        var_y = np.maximum(syy[nz] / c - (sy[nz] / c) ** 2, 0.0)
        scale = (stream.width + stream.height) / 2.0
        feats[nz, 2] = np.clip((np.sqrt(var_x) + np.sqrt(var_y)) / scale, 0.0, 1.0)
    return StepFeatures(feats, stream.t0, stream.span)
