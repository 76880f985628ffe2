"""Seeded synthetic scenes: moving boxes whose edges fire events.

Time advances in ticks of ``tick_us``.  During each tick every object sits at
an integer position and each of its perimeter pixels emits a Poisson number
of events (mean ``edge_rate * tick_us``) at uniform times inside the tick,
plus uniform background noise.  Objects bounce off the sensor border.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import BoxParams
from .events import EventStream


@dataclass(frozen=True)
class ObjectSpec:
    width: int
    height: int
    x: float  # initial top-left column
    y: float  # initial top-left row
    vx: float = 0.0  # px / us
    vy: float = 0.0
    class_id: int = 1


@dataclass(frozen=True)
class SyntheticSceneSpec:
    width: int
    height: int
    duration: int  # us
    objects: tuple[ObjectSpec, ...] = ()
    edge_rate: float = 5e-4  # events / edge pixel / us
    noise_rate: float = 0.0  # events / pixel / us
    seed: int = 0
    tick_us: int = 500
    gt_window_us: int = 5000

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(
            o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects))
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.tick_us <= 0 or self.gt_window_us <= 0:
            raise ValueError("tick_us and gt_window_us must be positive")
        if self.edge_rate < 0 or self.noise_rate < 0:
            raise ValueError("rates must be nonnegative")
        for i, o in enumerate(self.objects):
            if o.width < 1 or o.height < 1:
                raise ValueError(f"object {i}: size must be at least 1x1")
            if o.width > self.width or o.height > self.height:
                raise ValueError(
                    f"object {i}: {o.width}x{o.height} larger than sensor "
                    f"{self.width}x{self.height}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["objects"] = [asdict(o) for o in self.objects]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["objects"] = tuple(ObjectSpec(**o) for o in d.get("objects", ()))
        return cls(**d)


def _reflect(pos: np.ndarray, limit: float) -> np.ndarray:
    if limit <= 0:
        return np.zeros_like(pos)
    u = np.mod(pos, 2 * limit)
    return np.where(u > limit, 2 * limit - u, u)


def object_top_left(obj: ObjectSpec, spec: SyntheticSceneSpec, t) -> tuple[np.ndarray, np.ndarray]:
    """Integer top-left corner of ``obj`` during the tick containing ``t``."""
    tick_start = (np.asarray(t, dtype=np.int64) // spec.tick_us) * spec.tick_us
    x = _reflect(obj.x + obj.vx * tick_start, spec.width - obj.width)
    y = _reflect(obj.y + obj.vy * tick_start, spec.height - obj.height)
    return np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)


def perimeter(x0: int, y0: int, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of a rectangle's outline, row-major, each pixel once."""
    rows, cols = np.mgrid[0:h, 0:w]
    edge = (rows == 0) | (rows == h - 1) | (cols == 0) | (cols == w - 1)
    return cols[edge] + x0, rows[edge] + y0


@dataclass(frozen=True)
class GTObject:
    object_id: int
    class_id: int
    box: BoxParams


@dataclass
class GroundTruth:
    """Object boxes over time for one synthetic stream."""

    spec: SyntheticSceneSpec
    windows: list[tuple[int, int]] = field(default_factory=list)

    def boxes_at(self, t: int) -> list[GTObject]:
        out = []
        for i, obj in enumerate(self.spec.objects):
            x0, y0 = object_top_left(obj, self.spec, t)
            box = BoxParams.from_corners(int(x0), int(y0), int(x0) + obj.width,
                                         int(y0) + obj.height)
            out.append(GTObject(i, obj.class_id, box))
        return out

    def boxes_for_segment(self, t_a: int, t_b: int) -> list[GTObject]:
        """Objects as they stand at the last instant of ``[t_a, t_b)``."""
        return self.boxes_at(t_b - 1)

    def masks_at(self, t: int) -> list[np.ndarray]:
        return [o.box.mask(self.spec.height, self.spec.width) for o in self.boxes_at(t)]

    def to_json(self) -> dict:
        recs = []
        for t_a, t_b in self.windows:
            objs = []
            for o in self.boxes_for_segment(t_a, t_b):
                mask = o.box.mask(self.spec.height, self.spec.width)
                objs.append({"object_id": o.object_id, "class_id": o.class_id,
                             "box": o.box.as_list(), "mask_rle": rle_encode(mask)})
            recs.append({"window": [t_a, t_b], "objects": objs})
        return {"schema_version": 1, "spec": self.spec.to_json(), "windows": recs}

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        spec = SyntheticSceneSpec.from_json(d["spec"])
        return cls(spec, [tuple(w["window"]) for w in d["windows"]])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed run-length encoding over the row-major flattened mask.

    Counts alternate starting with a run of zeros (possibly empty).
    """
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(mask.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for c in rle["counts"]:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape(h, w)


def gen_synthetic(spec: SyntheticSceneSpec) -> tuple[EventStream, GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    xs, ys, ts = [], [], []
    n_ticks = -(-spec.duration // spec.tick_us)
    for k in range(n_ticks):
        start = k * spec.tick_us
        stop = min(start + spec.tick_us, spec.duration)
        length = stop - start
        for obj in spec.objects:
            x0, y0 = object_top_left(obj, spec, start)
            px, py = perimeter(int(x0), int(y0), obj.width, obj.height)
            counts = rng.poisson(spec.edge_rate * length, size=px.size)
            xs.append(np.repeat(px, counts))
            ys.append(np.repeat(py, counts))
            ts.append(rng.integers(start, stop, size=int(counts.sum())))
        if spec.noise_rate > 0:
            n_noise = rng.poisson(spec.noise_rate * length * spec.width * spec.height)
            xs.append(rng.integers(0, spec.width, size=n_noise))
            ys.append(rng.integers(0, spec.height, size=n_noise))
            ts.append(rng.integers(start, stop, size=n_noise))
    if xs:
        x, y, t = (np.concatenate(a).astype(np.int64) for a in (xs, ys, ts))
    else:
        x = y = t = np.zeros(0, dtype=np.int64)
    p = np.where(rng.random(len(t)) < 0.5, -1, 1)
    stream = EventStream.from_arrays(x, y, t, p, spec.width, spec.height, 0, spec.duration)
    windows = [(a, min(a + spec.gt_window_us, spec.duration))
               for a in range(0, spec.duration, spec.gt_window_us)]
    return stream, GroundTruth(spec, windows)
