"""Category-agnostic localization losses and text-embedding classification.

Class index 0 is always background, backed by the learnable embedding
``e_bg``; indices ``1..K`` are the base categories in declaration order and,
at inference, ``K+1..K+M`` the novel ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import BoxParams

BACKGROUND = "background"
DEFAULT_PROMPT = "A photo of a {class} in the scene."
MASK_EPS = 1e-7


def smooth_l1(d):
    d = np.asarray(d, dtype=np.float64)
    a = np.abs(d)
    out = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    return float(out) if out.ndim == 0 else out


def ca_box_loss(pred: Sequence[BoxParams], gt: Sequence[BoxParams], labels: Sequence[int]) -> float:
    """Shared (class-agnostic) Smooth-L1 box regression over foreground proposals."""
    if not len(pred) == len(gt) == len(labels):
        raise ValueError(f"length mismatch: {len(pred)} pred, {len(gt)} gt, {len(labels)} labels")
    total = 0.0
    for b, g, y in zip(pred, gt, labels):
        if y > 0:
            total += float(np.sum(smooth_l1(b.as_array() - g.as_array())))
    return total


def ca_mask_loss(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                 reduction: str = "sum") -> float:
    """Binary cross-entropy between predicted and ground-truth masks.

    ``reduction="sum"`` adds every pixel of every mask; ``"mean"`` divides by
    the total pixel count.
    """
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted masks vs {len(gt)} ground-truth masks")
    total, pixels = 0.0, 0
    for m, m_star in zip(pred, gt):
        m = np.asarray(m, dtype=np.float64)
        m_star = np.asarray(m_star, dtype=np.float64)
        if m.shape != m_star.shape:
            raise ValueError(f"mask shape {m.shape} != {m_star.shape}")
        if not np.all((m_star == 0) | (m_star == 1)):
            raise ValueError("ground-truth mask must be binary")
        m = np.clip(m, MASK_EPS, 1.0 - MASK_EPS)
        total -= float(np.sum(m_star * np.log(m) + (1.0 - m_star) * np.log(1.0 - m)))
        pixels += m.size
    if reduction == "mean":
        return total / pixels if pixels else 0.0
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm embedding")
    return v / n


def init_background(dim: int, seed: int = 0, jitter: float = 0.1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return _unit(np.ones(dim) + jitter * rng.standard_normal(dim))


@dataclass
class TextEmbeddingBank:
    base_names: list[str]
    base: np.ndarray  # (K, D)
    novel_names: list[str] = field(default_factory=list)
    novel: np.ndarray | None = None  # (M, D)
    e_bg: np.ndarray | None = None
    prompt_template: str = DEFAULT_PROMPT
    seed: int = 0

    def __post_init__(self):
        self.base = _unit(np.atleast_2d(np.asarray(self.base, dtype=np.float64)))
        dim = self.base.shape[1]
        if self.novel is None or len(self.novel) == 0:
            self.novel = np.zeros((0, dim))
        else:
            self.novel = _unit(np.atleast_2d(np.asarray(self.novel, dtype=np.float64)))
        if self.novel.shape[1] != dim:
            raise ValueError("base and novel embeddings differ in dimension")
        if len(self.base_names) != len(self.base) or len(self.novel_names) != len(self.novel):
            raise ValueError("names and embeddings disagree in count")
        overlap = set(self.base_names) & set(self.novel_names)
        if overlap or BACKGROUND in self.base_names + self.novel_names:
            raise ValueError(f"label sets must be disjoint and exclude background: {overlap}")
        self.e_bg = init_background(dim, self.seed) if self.e_bg is None else _unit(self.e_bg)

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def labels(self, include_novel: bool = True) -> list[str]:
        return [BACKGROUND] + self.base_names + (self.novel_names if include_novel else [])

    def matrix(self, include_novel: bool) -> np.ndarray:
        """Rows ``[e_bg, base..., novel...]``, all unit norm."""
        rows = [_unit(self.e_bg)[None], self.base]
        if include_novel:
            rows.append(self.novel)
        return np.concatenate(rows, axis=0)

    def prompts(self) -> list[str]:
        return [self.prompt_template.replace("{class}", n)
                for n in self.base_names + self.novel_names]

    def index_of(self, label: str | int) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= label <= len(self.base_names):
                raise ValueError(f"label index {label} outside background + base classes")
            return int(label)
        if label == BACKGROUND:
            return 0
        if label in self.base_names:
            return 1 + self.base_names.index(label)
        raise ValueError(f"unknown training label {label!r}")


@dataclass(frozen=True, eq=False)
class ClassLogits:
    z: np.ndarray
    labels: list[str]
    temperature: float | None = None


def class_logits(e_r, bank: TextEmbeddingBank, include_novel: bool = False) -> ClassLogits:
    e = np.asarray(e_r, dtype=np.float64)
    if e.shape[-1] != bank.dim:
        raise ValueError(f"embedding dim {e.shape[-1]} != bank dim {bank.dim}")
    return ClassLogits(bank.matrix(include_novel) @ _unit(e), bank.labels(include_novel))


@dataclass(frozen=True, eq=False)
class LabeledProposal:
    embedding: np.ndarray
    label: str | int | None = None
    roi: BoxParams | None = None


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))


def _text_terms(proposals, bank, tau):
    if not proposals:
        raise ValueError("need at least one proposal")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    e = np.stack([np.asarray(p.embedding, dtype=np.float64) for p in proposals])
    y = np.array([bank.index_of(p.label) for p in proposals])
    classes = bank.matrix(include_novel=False)
    e_hat = _unit(e)
    z = e_hat @ classes.T
    logp = _log_softmax(z / tau)
    return e, e_hat, y, classes, z, logp


def text_loss(proposals: Sequence[LabeledProposal], bank: TextEmbeddingBank, tau: float) -> float:
    """Mean cross-entropy of tempered cosine-similarity softmax over base + background."""
    _, _, y, _, _, logp = _text_terms(proposals, bank, tau)
    return float(-np.mean(logp[np.arange(len(y)), y]))


def grad_text_loss(proposals: Sequence[LabeledProposal], bank: TextEmbeddingBank, tau: float,
                   wrt_regions: bool = False):
    """Gradient of :func:`text_loss` w.r.t. the background embedding.

    Differentiates through the raw ``bank.e_bg`` (normalization included).
    With ``wrt_regions`` also returns the (n, D) gradient w.r.t. each region
    embedding.
    """
    e, e_hat, y, classes, z, logp = _text_terms(proposals, bank, tau)
    n = len(y)
    d_z = (np.exp(logp) - np.eye(classes.shape[0])[y]) / (tau * n)
    g = bank.e_bg
    g_norm = np.linalg.norm(g)
    # d cos(a, g) / d g = (a_hat - cos * g_hat) / |g|
    d_bg = (d_z[:, 0, None] * (e_hat - z[:, 0, None] * (g / g_norm))).sum(axis=0) / g_norm
    if not wrt_regions:
        return d_bg
    e_norm = np.linalg.norm(e, axis=1, keepdims=True)
    d_e = (d_z @ classes - np.sum(d_z * z, axis=1, keepdims=True) * e_hat) / e_norm
    return d_bg, d_e


def train_background(bank: TextEmbeddingBank, proposals: Sequence[LabeledProposal], tau: float,
                     lr: float = 0.1, iters: int = 100) -> list[float]:
    """Gradient steps on ``e_bg`` alone, renormalizing after each step."""
    history = []
    for _ in range(iters):
        history.append(text_loss(proposals, bank, tau))
        bank.e_bg = _unit(bank.e_bg - lr * grad_text_loss(proposals, bank, tau))
    return history


def classify(e_r, bank: TextEmbeddingBank, tau: float, score_threshold: float = 0.0
             ) -> tuple[str, float]:
    """Label and probability over ``[background, base, novel]``.

    Ties go to the lowest index.  A non-background winner scoring below
    ``score_threshold`` is reported as background with its own score.
    """
    if len(bank.base) + len(bank.novel) == 0:
        raise ValueError("empty text bank")
    logits = class_logits(e_r, bank, include_novel=True)
    probs = np.exp(_log_softmax(logits.z / tau))
    k = int(np.argmax(probs))
    label, score = logits.labels[k], float(probs[k])
    if k > 0 and score < score_threshold:
        return BACKGROUND, float(probs[0])
    return label, score


def save_text_bank(path, bank: TextEmbeddingBank) -> None:
    doc = {"schema_version": 1, "prompt_template": bank.prompt_template,
           "base_names": bank.base_names, "novel_names": bank.novel_names,
           "base": bank.base.tolist(), "novel": bank.novel.tolist(),
           "e_bg": bank.e_bg.tolist(), "seed": bank.seed}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_text_bank(path) -> TextEmbeddingBank:
    with open(path) as fh:
        d = json.load(fh)
    return TextEmbeddingBank(d["base_names"], np.array(d["base"]), d["novel_names"],
                             np.array(d["novel"]) if d["novel"] else None,
                             np.array(d["e_bg"]), d["prompt_template"], d.get("seed", 0))
