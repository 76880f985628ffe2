"""Membrane-potential losses that teach the slicer where to fire.

All three losses act on the non-reset trace ``U`` only, which is linear in
the slicer parameters ``theta = (w, b)``:

    U[n] = sum_{k<=n} leak**(n-k) * (w . f[k] + b)

so ``dU[n]/dtheta`` is a fixed matrix for given features (see
:func:`membrane_jacobian`).  Spike steps enter only as the set of steps at
which the incremental constraint is evaluated, held fixed for one gradient
step and refreshed between steps.

Step indices in this module are 1-based, matching the spike-step lists
produced by :mod:`evslice.slicer`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .events import EventStream, StepFeatures, to_voxel_grid, DEFAULT_BINS
from .slicer import LifConfig, SlicerModel, input_current, integrate

log = logging.getLogger(__name__)

CONDITION_SCALES = ("u_nstar", "v_th")


@dataclass(frozen=True)
class SliceTrainingTarget:
    n_star: int
    alpha: float = 0.1
    beta: float = 1.0

    def __post_init__(self):
        if self.n_star < 1:
            raise ValueError(f"n_star must be >= 1, got {self.n_star}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


@dataclass(frozen=True, eq=False)
class FeedbackProfile:
    l_m: np.ndarray

    def __post_init__(self):
        l_m = np.asarray(self.l_m, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(l_m)) or np.any(l_m < 0):
            raise ValueError("feedback losses must be finite and nonnegative")
        object.__setattr__(self, "l_m", l_m)

    def __len__(self) -> int:
        return len(self.l_m)

    @property
    def best_step(self) -> int:
        """1-based step with the lowest detection loss (first on ties)."""
        return int(np.argmin(self.l_m)) + 1


@dataclass(frozen=True)
class LossWeights:
    w_mem: float = 1.0
    w_lic: float = 1.0
    w_ssf: float = 1.0

    def __post_init__(self):
        ws = (self.w_mem, self.w_lic, self.w_ssf)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError(f"weights must be nonnegative with one positive, got {ws}")


def _check_step(n: int, length: int, name: str) -> None:
    if not 1 <= n <= length:
        raise ValueError(f"{name}={n} outside [1, {length}]")


def mem_loss(u, target: SliceTrainingTarget, v_th: float) -> float:
    u = np.asarray(u, dtype=np.float64)
    _check_step(target.n_star, len(u), "n_star")
    r = u[target.n_star - 1] - (1.0 + target.alpha) * v_th
    return float(r * r)


def _lic_active(u: np.ndarray, n_c: int, target: SliceTrainingTarget, v_th: float,
                condition_scale: str) -> tuple[bool, float]:
    ratio = (n_c / target.n_star) ** target.beta
    if condition_scale == "u_nstar":
        bound = u[target.n_star - 1] * ratio
    elif condition_scale == "v_th":
        bound = v_th * ratio
    else:
        raise ValueError(f"condition_scale must be one of {CONDITION_SCALES}")
    return bool(u[n_c - 1] >= bound), ratio


def lic_loss(u, n_c: int, target: SliceTrainingTarget, v_th: float,
             condition_scale: str = "u_nstar") -> float:
    """Linear incremental constraint at step ``n_c``.

    Active only while ``U[n_c]`` sits on or above the growth schedule; then it
    pulls ``U[n_c]`` to ``v_th * (n_c / n_star) ** beta``.
    """
    u = np.asarray(u, dtype=np.float64)
    _check_step(target.n_star, len(u), "n_star")
    _check_step(n_c, len(u), "n_c")
    active, ratio = _lic_active(u, n_c, target, v_th, condition_scale)
    if not active:
        return 0.0
    r = u[n_c - 1] - v_th * ratio
    return float(r * r)


def ssf_loss(u, profile: FeedbackProfile, v_th: float) -> float:
    u = np.asarray(u, dtype=np.float64)
    if len(profile) != len(u):
        raise ValueError(f"profile length {len(profile)} != trace length {len(u)}")
    return float(np.sum(profile.l_m * np.abs(u - v_th)))


def total_loss(u, spike_steps: Sequence[int], target: SliceTrainingTarget,
               profile: FeedbackProfile, v_th: float,
               weights: LossWeights = LossWeights(),
               condition_scale: str = "u_nstar") -> float:
    """Weighted sum; the incremental term is summed over ``spike_steps``."""
    lic = sum(lic_loss(u, n, target, v_th, condition_scale) for n in spike_steps)
    return (weights.w_mem * mem_loss(u, target, v_th)
            + weights.w_lic * lic
            + weights.w_ssf * ssf_loss(u, profile, v_th))


def membrane_jacobian(features: StepFeatures | np.ndarray, leak: float) -> np.ndarray:
    """``J[n-1, :] = dU[n] / d(w, b)``, shape ``(N, dim + 1)``."""
    f = features.values if isinstance(features, StepFeatures) else np.asarray(features)
    x = np.hstack([f, np.ones((f.shape[0], 1))])
    jac = np.empty_like(x)
    acc = np.zeros(x.shape[1])
    for n in range(x.shape[0]):
        acc = leak * acc + x[n]
        jac[n] = acc
    return jac


def lic_steps(spike_steps: Sequence[int], n_star: int, probe: bool = True) -> list[int]:
    """Steps at which the incremental constraint is evaluated during training.

    Realized spikes before ``n_star``; with ``probe`` every step before
    ``n_star`` is included whether or not it fired.
    """
    steps = {n for n in spike_steps if n < n_star}
    if probe:
        steps.update(range(1, n_star))
    return sorted(steps)


def grad_total_loss(model: SlicerModel, features: StepFeatures, config: LifConfig,
                    target: SliceTrainingTarget, profile: FeedbackProfile,
                    weights: LossWeights = LossWeights(),
                    spike_steps: Sequence[int] | None = None,
                    condition_scale: str = "u_nstar") -> np.ndarray:
    """Gradient of :func:`total_loss` w.r.t. ``(w, b)``, flattened as ``[w..., b]``.

    ``spike_steps`` defaults to the steps at which the model currently fires.
    ``|U - v_th|`` takes subgradient 0 at the kink.
    """
    if spike_steps is None:
        spike_steps = integrate(input_current(model, features), config).spike_steps
    jac = membrane_jacobian(features, config.leak)
    u = jac @ model.params
    return _grad_from_trace(u, jac, spike_steps, target, profile, config.v_th, weights,
                            condition_scale)


def _grad_from_trace(u, jac, spike_steps, target, profile, v_th, weights,
                     condition_scale) -> np.ndarray:
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite membrane trace")
    _check_step(target.n_star, len(u), "n_star")
    if len(profile) != len(u):
        raise ValueError(f"profile length {len(profile)} != trace length {len(u)}")
    dl_du = np.zeros_like(u)
    k = target.n_star - 1
    dl_du[k] += weights.w_mem * 2.0 * (u[k] - (1.0 + target.alpha) * v_th)
    for n in spike_steps:
        _check_step(n, len(u), "n_c")
        active, ratio = _lic_active(u, n, target, v_th, condition_scale)
        if active:
            dl_du[n - 1] += weights.w_lic * 2.0 * (u[n - 1] - v_th * ratio)
    dl_du += weights.w_ssf * profile.l_m * np.sign(u - v_th)
    grad = dl_du @ jac
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return grad


# ---------------------------------------------------------------------------
# Detection feedback
# ---------------------------------------------------------------------------

def detection_feedback(stream: EventStream, ground_truth, detector, n_steps: int,
                       bins: int = DEFAULT_BINS, normalize: bool = True) -> FeedbackProfile:
    """Detection loss of the leading segment ``[t0, end of step n)`` for each n.

    ``detector`` needs ``loss(grid, gt_boxes) -> float``; ``ground_truth``
    needs ``boxes_for_segment(t_a, t_b)``.  The profile is scaled to a maximum
    of 1 unless it is identically zero.
    """
    grid_steps = StepFeatures(np.zeros((n_steps, 3)), stream.t0, stream.span)
    losses = np.zeros(n_steps)
    for n in range(1, n_steps + 1):
        t_b = grid_steps.step_end(n)
        try:
            grid = to_voxel_grid(stream, (stream.t0, t_b), bins=bins)
            gt = [o.box for o in ground_truth.boxes_for_segment(stream.t0, t_b)]
            losses[n - 1] = detector.loss(grid, gt)
        except Exception as exc:
            raise RuntimeError(f"detector failed at step {n}: {exc}") from exc
    peak = losses.max()
    if normalize and peak > 0:
        losses = losses / peak
    return FeedbackProfile(losses)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 3e-3
    max_iters: int = 2000
    tol: float = 1e-8


@dataclass
class TrainReport:
    iterations: int = 0
    final_loss: float = float("nan")
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    final_spike_steps: list[list[int]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


@dataclass(frozen=True)
class SliceSample:
    features: StepFeatures
    target: SliceTrainingTarget
    profile: FeedbackProfile


def _spike_steps_from_u(u: np.ndarray, config: LifConfig) -> list[int]:
    # U is the reset-free trace, so the currents are its leaky differences.
    currents = u - config.leak * np.concatenate([[0.0], u[:-1]])
    return integrate(currents, config).spike_steps


def dataset_loss_and_grad(theta: np.ndarray, dataset: Sequence[SliceSample],
                          config: LifConfig, weights: LossWeights,
                          condition_scale: str = "u_nstar", probe: bool = True,
                          jacobians: Sequence[np.ndarray] | None = None
                          ) -> tuple[float, np.ndarray]:
    """Mean loss and gradient over the dataset, with refreshed spike steps."""
    if jacobians is None:
        jacobians = [membrane_jacobian(s.features, config.leak) for s in dataset]
    total = 0.0
    grad = np.zeros_like(theta)
    for sample, jac in zip(dataset, jacobians):
        u = jac @ theta
        steps = lic_steps(_spike_steps_from_u(u, config), sample.target.n_star, probe)
        total += total_loss(u, steps, sample.target, sample.profile, config.v_th,
                            weights, condition_scale)
        grad += _grad_from_trace(u, jac, steps, sample.target, sample.profile,
                                 config.v_th, weights, condition_scale)
    return total / len(dataset), grad / len(dataset)


def train_slicer(model: SlicerModel, dataset: Sequence[SliceSample | tuple],
                 config: LifConfig, weights: LossWeights = LossWeights(),
                 optimizer: OptimizerConfig = OptimizerConfig(),
                 condition_scale: str = "u_nstar",
                 probe: bool = True) -> tuple[SlicerModel, TrainReport]:
    """Full-batch gradient descent on the mean total loss.

    Stops once the gradient norm drops below ``optimizer.tol`` or after
    ``optimizer.max_iters`` evaluations.  ``report.loss[i]`` is the loss at the
    parameters before step ``i``; ``report.final_loss`` is the loss of the
    returned model.
    """
    dataset = [s if isinstance(s, SliceSample) else SliceSample(*s) for s in dataset]
    if not dataset:
        raise ValueError("empty training set")
    for i, s in enumerate(dataset):
        _check_step(s.target.n_star, s.features.n_steps, f"sample {i} n_star")
        if len(s.profile) != s.features.n_steps:
            raise ValueError(f"sample {i}: profile length {len(s.profile)} != "
                             f"{s.features.n_steps} steps")
    theta = model.params.copy()
    jacobians = [membrane_jacobian(s.features, config.leak) for s in dataset]
    report = TrainReport()
    for it in range(optimizer.max_iters):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = dataset_loss_and_grad(theta, dataset, config, weights,
                                                   condition_scale, probe, jacobians)
        except (FloatingPointError, ValueError) as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}; params={theta.tolist()}") from exc
        gnorm = float(np.linalg.norm(grad))
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            raise TrainingDiverged(
                f"iteration {it}: loss={loss}, |grad|={gnorm}, params={theta.tolist()}")
        report.loss.append(float(loss))
        report.grad_norm.append(gnorm)
        if gnorm < optimizer.tol:
            break
        theta = theta - optimizer.lr * grad
    report.iterations = len(report.loss)
    report.final_loss = float(dataset_loss_and_grad(theta, dataset, config, weights,
                                                    condition_scale, probe, jacobians)[0])
    final = SlicerModel.from_params(theta)
    report.final_spike_steps = [
        integrate(input_current(final, s.features), config).spike_steps for s in dataset]
    log.debug("train_slicer: %d iterations, final loss %.6g", report.iterations,
              report.final_loss)
    return final, report


def first_spike(model: SlicerModel, features: StepFeatures, config: LifConfig) -> int | None:
    steps = integrate(input_current(model, features), config).spike_steps
    return steps[0] if steps else None
