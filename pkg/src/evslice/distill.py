"""Attention-weighted image-to-event contrastive distillation.

A region's student embedding is ``normalize(G(avgpool(F_evt, roi)))`` with
``G`` an affine projection head.  Each student is scaled by the fused spatial
attention mass of its region and contrasted against frozen teacher vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import BoxParams
from .events import VoxelGrid

MODES = ("exclude_self", "infonce")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # (C, H, W)
    role: str = "event"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or min(d.shape) < 1:
            raise ValueError(f"feature map must be C x H x W, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("feature map has non-finite entries")
        if self.role not in ("event", "image"):
            raise ValueError(f"role must be 'event' or 'image', got {self.role!r}")
        object.__setattr__(self, "data", d)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class AttentionMap:
    data: np.ndarray  # (H, W), positive, sums to 1
    temperature: float


@dataclass(frozen=True)
class DistillConfig:
    tau_attn: float = 1.0
    tau_contrast: float = 0.1
    denominator_mode: str = "exclude_self"

    def __post_init__(self):
        if not (self.tau_attn > 0 and self.tau_contrast > 0):
            raise ValueError("temperatures must be positive")
        if self.denominator_mode not in MODES:
            raise ValueError(f"denominator_mode must be one of {MODES}")


def channel_abs_pool(f: FeatureMap) -> np.ndarray:
    return np.abs(f.data).mean(axis=0)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def attention_map(f: FeatureMap, tau: float) -> AttentionMap:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    pooled = channel_abs_pool(f)
    return AttentionMap(_softmax(pooled.ravel() / tau).reshape(pooled.shape), tau)


def fuse_attention(n_evt: AttentionMap, n_img: AttentionMap) -> AttentionMap:
    if n_evt.data.shape != n_img.data.shape:
        raise ValueError(f"attention shapes differ: {n_evt.data.shape} vs {n_img.data.shape}")
    return AttentionMap((n_evt.data + n_img.data) / 2.0, n_evt.temperature)


def region_attention_weight(a: AttentionMap, roi: BoxParams) -> float:
    """Attention mass inside ``roi``, rescaled so a uniform map gives 1."""
    h, w = a.data.shape
    rows, cols = roi.cells(h, w)
    area = (rows.stop - rows.start) * (cols.stop - cols.start)
    if area == 0:
        raise ValueError(f"roi {roi} does not intersect the {h}x{w} map")
    return float(a.data[rows, cols].sum() * (h * w) / area)


# ---------------------------------------------------------------------------
# Projection head and region embeddings
# ---------------------------------------------------------------------------

@dataclass
class ProjectionHead:
    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (D,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.size:
            raise ValueError("weight must be (D, C) with bias of length D")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, seed: int = 0, scale: float | None = None
             ) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(in_dim) if scale is None else scale
        return cls(rng.normal(0.0, scale, (out_dim, in_dim)), np.zeros(out_dim))

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls(np.eye(dim), np.zeros(dim))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias

    def params(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias])

    def with_params(self, theta: np.ndarray) -> "ProjectionHead":
        n = self.weight.size
        return ProjectionHead(theta[:n].reshape(self.weight.shape).copy(), theta[n:].copy())

    def to_json(self) -> dict:
        return {"weight": self.weight.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ProjectionHead":
        return cls(np.array(d["weight"], dtype=np.float64), np.array(d["bias"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class RegionEmbedding:
    vector: np.ndarray  # (D,)
    roi: BoxParams
    pooled: np.ndarray  # (C,) pre-projection feature
    unit_norm: bool = True


def roi_avg_pool(f: FeatureMap, roi: BoxParams) -> np.ndarray:
    _, h, w = f.shape
    rows, cols = roi.cells(h, w)
    if rows.stop <= rows.start or cols.stop <= cols.start:
        raise ValueError(f"degenerate roi {roi} on a {h}x{w} map")
    return f.data[:, rows, cols].mean(axis=(1, 2))


def embed_pooled(head: ProjectionHead, pooled: np.ndarray, unit_norm: bool = True) -> np.ndarray:
    z = head(np.asarray(pooled, dtype=np.float64))
    if not unit_norm:
        return z
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("projected feature has zero norm")
    return z / norm


def region_embed(f_evt: FeatureMap, head: ProjectionHead, roi: BoxParams,
                 unit_norm: bool = True) -> RegionEmbedding:
    pooled = roi_avg_pool(f_evt, roi)
    if pooled.size != head.in_dim:
        raise ValueError(f"feature map has {pooled.size} channels, head expects {head.in_dim}")
    return RegionEmbedding(embed_pooled(head, pooled, unit_norm), roi, pooled, unit_norm)


def head_backward(head: ProjectionHead, pooled: np.ndarray, d_vec: np.ndarray,
                  unit_norm: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Pull gradients w.r.t. output embeddings back to ``(dW, db)``.

    ``pooled`` is (n, C) and ``d_vec`` is (n, D), the gradient of the loss with
    respect to each (normalized, if ``unit_norm``) embedding.
    """
    pooled = np.atleast_2d(pooled)
    d_vec = np.atleast_2d(d_vec)
    z = head(pooled)
    if unit_norm:
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        f = z / norm
        d_z = (d_vec - f * np.sum(f * d_vec, axis=1, keepdims=True)) / norm
    else:
        d_z = d_vec
    return d_z.T @ pooled, d_z.sum(axis=0)


# ---------------------------------------------------------------------------
# Contrastive loss
# ---------------------------------------------------------------------------

def _logsumexp(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp over entries where ``mask`` is true."""
    masked = np.where(mask, x, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.where(mask, np.exp(masked - m), 0.0),
                              axis=1, keepdims=True)))[:, 0]


def _contrastive(scaled: np.ndarray, teachers: np.ndarray, tau: float, mode: str
                 ) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the attention-scaled students."""
    n = scaled.shape[0]
    logits = scaled @ teachers.T / tau
    mask = np.ones((n, n), dtype=bool)
    if mode == "exclude_self":
        np.fill_diagonal(mask, False)
    lse = _logsumexp(logits, mask)
    loss = float(np.sum(lse - np.diag(logits)))
    probs = np.where(mask, np.exp(np.where(mask, logits, -np.inf) - lse[:, None]), 0.0)
    d_logits = probs - np.eye(n)
    return loss, d_logits @ teachers / tau


def _stack(students, teachers, config):
    if config.denominator_mode == "exclude_self" and len(students) < 2:
        raise ValueError("exclude_self-mode contrast needs at least two regions")
    if len(students) < 1 or len(students) != len(teachers):
        raise ValueError(f"{len(students)} students vs {len(teachers)} teachers")
    emb = np.stack([np.asarray(s.vector, dtype=np.float64) for s, _ in students])
    weights = np.array([float(a) for _, a in students])
    t = np.stack([np.asarray(v, dtype=np.float64) for v in teachers])
    if t.shape[1] != emb.shape[1]:
        raise ValueError(f"student dim {emb.shape[1]} != teacher dim {t.shape[1]}")
    return emb, weights, t


def f2e_loss(students: Sequence[tuple[RegionEmbedding, float]], teachers: Sequence[np.ndarray],
             config: DistillConfig = DistillConfig()) -> float:
    """Contrastive distillation loss summed over regions.

    Region ``i`` is scored against its own teacher in the numerator; the
    denominator runs over the other teachers (``exclude_self``) or all of them
    (``infonce``).  Teacher vectors double as the image-side negatives.
    """
    emb, weights, t = _stack(students, teachers, config)
    loss, _ = _contrastive(weights[:, None] * emb, t, config.tau_contrast,
                           config.denominator_mode)
    return loss


def grad_f2e(students: Sequence[tuple[RegionEmbedding, float]], teachers: Sequence[np.ndarray],
             head: ProjectionHead, config: DistillConfig = DistillConfig()
             ) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`f2e_loss` w.r.t. the head's ``(weight, bias)``."""
    emb, weights, t = _stack(students, teachers, config)
    _, d_scaled = _contrastive(weights[:, None] * emb, t, config.tau_contrast,
                               config.denominator_mode)
    d_emb = weights[:, None] * d_scaled
    pooled = np.stack([s.pooled for s, _ in students])
    unit = all(s.unit_norm for s, _ in students)
    d_w, d_b = head_backward(head, pooled, d_emb, unit)
    if not (np.all(np.isfinite(d_w)) and np.all(np.isfinite(d_b))):
        raise FloatingPointError("non-finite distillation gradient")
    return d_w, d_b


@dataclass(frozen=True)
class DistillSample:
    pooled: np.ndarray
    attention: float
    teacher: np.ndarray


def train_projection(head: ProjectionHead, samples: Sequence[DistillSample],
                     config: DistillConfig = DistillConfig(), lr: float = 0.05,
                     iters: int = 300) -> tuple[ProjectionHead, list[float]]:
    """Plain gradient descent on the per-region mean of the distillation loss.

    Averaging keeps the step size independent of the number of regions.
    ``history`` holds the mean loss before each step.
    """
    history = []
    teachers = [s.teacher for s in samples]
    n = len(samples)
    for _ in range(iters):
        students = [(RegionEmbedding(embed_pooled(head, s.pooled), None, s.pooled), s.attention)
                    for s in samples]
        history.append(f2e_loss(students, teachers, config) / n)
        d_w, d_b = grad_f2e(students, teachers, head, config)
        head = ProjectionHead(head.weight - lr * d_w / n, head.bias - lr * d_b / n)
    return head, history


# ---------------------------------------------------------------------------
# Event feature backbone
# ---------------------------------------------------------------------------

def event_feature_map(grid: VoxelGrid) -> FeatureMap:
    """Fixed, parameter-free event features on the voxel grid's pixel lattice.

    Channels: saturating occupancy ``A = 1 - exp(-count)``, horizontal and
    vertical edge continuity (``A`` times the mean occupancy of the two
    row / column neighbours), then the share of each pixel's events falling
    in each temporal bin, weighted by ``A``.
    """
    counts = np.abs(grid.data)
    total = counts.sum(axis=0)
    occ = 1.0 - np.exp(-total)
    pad = np.pad(occ, 1)
    horiz = occ * (pad[1:-1, :-2] + pad[1:-1, 2:]) / 2.0
    vert = occ * (pad[:-2, 1:-1] + pad[2:, 1:-1]) / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(total > 0, counts / np.where(total > 0, total, 1.0), 0.0)
    return FeatureMap(np.concatenate([occ[None], horiz[None], vert[None], share * occ], axis=0))


def save_head(path, head: ProjectionHead, extra: dict | None = None) -> None:
    doc = {"schema_version": 1, "head": head.to_json()}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_head(path) -> tuple[ProjectionHead, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    return ProjectionHead.from_json(doc["head"]), doc
