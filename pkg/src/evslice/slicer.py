"""Single leaky integrate-and-fire neuron used as an event-stream slicer.

Two membrane traces are kept side by side: ``v`` resets after every spike
and decides where the stream is cut, ``u`` integrates the same current
without ever resetting and is what the slicing losses supervise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .events import EventStream, StepFeatures

DEFAULT_N_STEPS = 16


@dataclass(frozen=True)
class LifConfig:
    v_th: float = 1.0
    leak: float = 0.9
    reset_mode: str = "hard"
    surrogate_width: float = 1.0
    rearm: bool = True  # keep integrating (and slicing) after the first spike

    def __post_init__(self):
        if not self.v_th > 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if not 0 < self.leak <= 1:
            raise ValueError(f"leak must be in (0, 1], got {self.leak}")
        if self.reset_mode not in ("hard", "soft"):
            raise ValueError(f"reset_mode must be 'hard' or 'soft', got {self.reset_mode!r}")
        if not self.surrogate_width > 0:
            raise ValueError("surrogate_width must be positive")


@dataclass
class SlicerModel:
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.b = float(self.b)
        if not (np.all(np.isfinite(self.w)) and np.isfinite(self.b)):
            raise ValueError("slicer parameters must be finite")

    @property
    def params(self) -> np.ndarray:
        return np.append(self.w, self.b)

    @classmethod
    def from_params(cls, theta) -> "SlicerModel":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[:-1].copy(), float(theta[-1]))


@dataclass(frozen=True, eq=False)
class LifState:
    u: np.ndarray  # non-reset trace U[n]
    v: np.ndarray  # reset trace V[n]
    h: np.ndarray  # pre-reset potential H[n]
    s: np.ndarray  # spikes S[n] in {0, 1}

    @property
    def n_steps(self) -> int:
        return len(self.u)

    @property
    def spike_steps(self) -> list[int]:
        """1-based steps at which the neuron fired."""
        return [int(i) + 1 for i in np.flatnonzero(self.s)]


@dataclass(frozen=True)
class SliceResult:
    spike_steps: list[int]
    segments: list[tuple[int, int]]


def input_current(model: SlicerModel, features: StepFeatures | np.ndarray) -> np.ndarray:
    f = features.values if isinstance(features, StepFeatures) else np.asarray(features)
    if f.ndim != 2 or f.shape[1] != model.w.size:
        raise ValueError(f"features of shape {f.shape} do not match weights of size {model.w.size}")
    return f @ model.w + model.b


def integrate(currents, config: LifConfig) -> LifState:
    currents = np.asarray(currents, dtype=np.float64).reshape(-1)
    if currents.size < 1:
        raise ValueError("need at least one step")
    if not np.all(np.isfinite(currents)):
        raise ValueError("non-finite input current")
    n = currents.size
    u, v, h, s = (np.zeros(n) for _ in range(4))
    u_prev = v_prev = 0.0
    fired = False
    for k in range(n):
        u_prev = config.leak * u_prev + currents[k]
        u[k] = u_prev
        h[k] = config.leak * v_prev + currents[k]
        spike = h[k] >= config.v_th and (config.rearm or not fired)
        if spike:
            s[k] = 1.0
            fired = True
            v_prev = 0.0 if config.reset_mode == "hard" else h[k] - config.v_th
        else:
            v_prev = h[k]
        v[k] = v_prev
    return LifState(u, v, h, s)


def run_slicer(model: SlicerModel, features: StepFeatures, config: LifConfig) -> LifState:
    return integrate(input_current(model, features), config)


def slice_points(state: LifState, stream: EventStream | StepFeatures) -> SliceResult:
    """Cut the window at every spike step; the remainder forms a final segment."""
    if isinstance(stream, EventStream):
        grid = StepFeatures(np.zeros((state.n_steps, 3)), stream.t0, stream.span)
    else:
        grid = stream
    if grid.n_steps != state.n_steps:
        raise ValueError(f"state has {state.n_steps} steps, grid has {grid.n_steps}")
    steps = state.spike_steps
    bounds = [grid.step_end(n) for n in steps]
    if not bounds or bounds[-1] != grid.t0 + grid.span:
        bounds.append(grid.t0 + grid.span)
    segments = []
    start = grid.t0
    for end in bounds:
        if end > start:
            segments.append((start, end))
            start = end
    return SliceResult(steps, segments)


def surrogate_spike_grad(u: float, config: LifConfig) -> float:
    """Rectangular surrogate for dS/dU, centred on the threshold."""
    half = config.surrogate_width / 2.0
    return 1.0 / config.surrogate_width if abs(u - config.v_th) <= half else 0.0


def save_model(path, model: SlicerModel, config: LifConfig) -> None:
    with open(path, "w") as fh:
        fh.write(model_to_json(model, config))


def model_to_json(model: SlicerModel, config: LifConfig) -> str:
    doc = {"schema_version": 1, "lif": asdict(config),
           "model": {"w": model.w.tolist(), "b": model.b}}
    return json.dumps(doc, sort_keys=True, indent=2)


def load_model(path) -> tuple[SlicerModel, LifConfig]:
    with open(path) as fh:
        doc = json.load(fh)
    return SlicerModel(doc["model"]["w"], doc["model"]["b"]), LifConfig(**doc["lif"])
