"""End-to-end pipeline: slicer training, distillation, head training, inference.

Every stage is a pure function of the configuration and the artifacts of
earlier stages, so the CLI can run them one at a time through files while
:func:`run_pipeline` chains them in memory and writes outputs only once all
stages succeed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..boxes import BoxParams, iou, nms
from ..distill import (DistillConfig, DistillSample, FeatureMap, ProjectionHead, RegionEmbedding,
                       attention_map, embed_pooled, event_feature_map, f2e_loss, fuse_attention,
                       grad_f2e, head_backward, region_attention_weight, roi_avg_pool,
                       train_projection)
from ..embeddings import EmbeddingBank, load_embeddings, load_roi_manifest
from ..events import DEFAULT_BINS, EventStream, micro_bin_features, slice_window, to_voxel_grid
from ..ovd_head import (BACKGROUND, LabeledProposal, TextEmbeddingBank, _unit, classify,
                        grad_text_loss, text_loss)
from ..slicer import LifConfig, SlicerModel, model_to_json, run_slicer, slice_points
from ..slicing_losses import (LossWeights, OptimizerConfig, SliceSample, SliceTrainingTarget,
                              TrainReport, detection_feedback, train_slicer)
from ..synthetic import GroundTruth
from .dataset import LabelMap, StreamEntry, load_dataset_index, load_label_map
from .detector import ToyDetector
from .metrics import DetectionRecord, GTRecord, MapReport, eval_map

log = logging.getLogger("evslice")

SCHEMA_VERSION = 1
PATH_KEYS = ("dataset", "teacher_embeddings", "roi_manifest", "text_embeddings", "label_map")


class ConfigError(ValueError):
    """Invalid or incomplete configuration; reported before any work starts."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class SlicerSettings:
    n_steps: int = 16
    window_us: int = 20000
    bins: int = DEFAULT_BINS
    alpha: float = 0.05
    beta: float = 0.5
    weights: LossWeights = LossWeights(1.0, 1.0, 0.01)
    optimizer: OptimizerConfig = OptimizerConfig(lr=3e-3, max_iters=400, tol=1e-9)
    condition_scale: str = "u_nstar"
    probe: bool = True
    lif: LifConfig = LifConfig()


@dataclass(frozen=True)
class DistillSettings:
    config: DistillConfig = DistillConfig()
    lr: float = 0.05
    iters: int = 300
    match_iou: float = 0.5
    out_dim: int | None = None  # defaults to the teacher dimension


@dataclass(frozen=True)
class HeadSettings:
    tau: float = 0.05
    score_threshold: float = 0.0
    lr: float = 0.05
    iters: int = 300
    distill_weight: float = 1.0
    train_projection: bool = True
    nms_iou: float = 0.5
    match_iou: float = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    paths: dict
    slicer: SlicerSettings = SlicerSettings()
    distill: DistillSettings = DistillSettings()
    head: HeadSettings = HeadSettings()
    detector: ToyDetector = ToyDetector()
    seeds: dict = field(default_factory=lambda: {"head_init": 0, "background": 0})
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def path(self, key: str) -> Path:
        return Path(self.paths[key])

    @property
    def output_dir(self) -> Path:
        return Path(self.paths["output_dir"])

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, doc: dict | None, where: str):
    doc = dict(doc or {})
    known = set(cls.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict, base_dir: Path | str = ".", check_files: bool = True
                     ) -> PipelineConfig:
    """Validate a configuration document; relative paths resolve against ``base_dir``."""
    base_dir = Path(base_dir)
    if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc.get('schema_version')!r}")
    unknown = set(doc) - {"schema_version", "paths", "slicer", "distill", "head", "detector", "seeds"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    paths_in = doc.get("paths") or {}
    missing = [k for k in PATH_KEYS + ("output_dir",) if k not in paths_in]
    if missing:
        raise ConfigError(f"paths: missing {missing}")
    paths = {k: str(base_dir / v) for k, v in paths_in.items()}
    if check_files:
        for key in PATH_KEYS:
            if not Path(paths[key]).is_file():
                raise ConfigError(f"paths.{key}: file not found: {paths[key]}")

    s = dict(doc.get("slicer") or {})
    lif = _build(LifConfig, s.pop("lif", None), "slicer.lif")
    weights = _build(LossWeights, s.pop("weights", None), "slicer.weights") \
        if "weights" in s else SlicerSettings.weights
    opt = _build(OptimizerConfig, s.pop("optimizer", None), "slicer.optimizer") \
        if "optimizer" in s else SlicerSettings.optimizer
    slicer = _build(SlicerSettings, dict(s, lif=lif, weights=weights, optimizer=opt), "slicer")
    if slicer.window_us % slicer.n_steps:
        raise ConfigError("slicer.window_us must be a multiple of slicer.n_steps")

    d = dict(doc.get("distill") or {})
    dcfg = _build(DistillConfig, {k: d.pop(k) for k in ("tau_attn", "tau_contrast",
                                                        "denominator_mode") if k in d},
                  "distill")
    distill = _build(DistillSettings, dict(d, config=dcfg), "distill")
    head = _build(HeadSettings, doc.get("head"), "head")
    detector = _build(ToyDetector, doc.get("detector"), "detector")
    seeds = {"head_init": 0, "background": 0, **(doc.get("seeds") or {})}
    return PipelineConfig(paths, slicer, distill, head, detector, seeds, raw=doc)


def load_config(path, check_files: bool = True) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(doc, path.parent, check_files)


# ---------------------------------------------------------------------------
# Shared per-segment machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Inputs:
    streams: list[tuple[StreamEntry, EventStream, GroundTruth]]
    labels: LabelMap
    text: EmbeddingBank
    teachers: EmbeddingBank
    rois: list

    def split(self, name: str):
        return [s for s in self.streams if s[0].split == name]


def load_inputs(config: PipelineConfig) -> Inputs:
    entries = load_dataset_index(config.path("dataset"))
    streams = [(e, *e.load()) for e in entries]
    return Inputs(streams, load_label_map(config.path("label_map")),
                  load_embeddings(config.path("text_embeddings")),
                  load_embeddings(config.path("teacher_embeddings")),
                  load_roi_manifest(config.path("roi_manifest")))


def windows(stream: EventStream, window_us: int) -> list[tuple[int, int]]:
    out, t = [], stream.t0
    while t < stream.t_end:
        out.append((t, min(t + window_us, stream.t_end)))
        t += window_us
    return out


def segment_stream(stream: EventStream, model: SlicerModel, settings: SlicerSettings
                   ) -> list[tuple[int, int]]:
    """Slice every processing window independently; segments in time order."""
    segments = []
    for t_a, t_b in windows(stream, settings.window_us):
        feats = micro_bin_features(slice_window(stream, t_a, t_b), settings.n_steps)
        state = run_slicer(model, feats, settings.lif)
        segments.extend(slice_points(state, feats).segments)
    return segments


@dataclass(frozen=True, eq=False)
class Region:
    stream_id: str
    segment: int
    window: tuple[int, int]
    box: BoxParams
    pooled: np.ndarray
    attention: float


def render_frame(gt: GroundTruth, t: int) -> FeatureMap:
    """Stand-in image feature map: union of the ground-truth masks at ``t``."""
    masks = gt.masks_at(t)
    frame = np.zeros((gt.spec.height, gt.spec.width))
    for m in masks:
        frame = np.maximum(frame, m)
    return FeatureMap(frame[None], role="image")


def extract_regions(stream_id: str, stream: EventStream, gt: GroundTruth,
                    segments: list[tuple[int, int]], config: PipelineConfig) -> list[Region]:
    tau = config.distill.config.tau_attn
    out = []
    for k, (t_a, t_b) in enumerate(segments):
        grid = to_voxel_grid(stream, (t_a, t_b), config.slicer.bins, stream.height, stream.width)
        proposals = config.detector.propose(grid)
        if not proposals:
            continue
        fmap = event_feature_map(grid)
        fused = fuse_attention(attention_map(fmap, tau), attention_map(render_frame(gt, t_b - 1), tau))
        for box in proposals:
            out.append(Region(stream_id, k, (t_a, t_b), box, roi_avg_pool(fmap, box),
                              region_attention_weight(fused, box)))
    return out


def _best_match(box: BoxParams, candidates, min_iou: float):
    best, best_iou = None, min_iou
    for c, c_box in candidates:
        o = iou(box, c_box)
        if o >= best_iou and (best is None or o > best_iou):
            best, best_iou = c, o
    return best


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_train_slicer(config: PipelineConfig, inputs: Inputs
                       ) -> tuple[SlicerModel, TrainReport, int]:
    s = config.slicer
    samples = []
    for _, stream, gt in inputs.split("train"):
        for t_a, t_b in windows(stream, s.window_us):
            sub = slice_window(stream, t_a, t_b)
            if len(sub) == 0:
                continue
            feedback = detection_feedback(sub, gt, config.detector, s.n_steps, s.bins)
            if np.ptp(feedback.l_m) == 0:
                continue
            target = SliceTrainingTarget(feedback.best_step, s.alpha, s.beta)
            samples.append(SliceSample(micro_bin_features(sub, s.n_steps), target, feedback))
    if not samples:
        raise ValueError("no informative training windows for the slicer")
    model, report = train_slicer(SlicerModel(), samples, s.lif, s.weights, s.optimizer,
                                 s.condition_scale, s.probe)
    log.info("slicer: %d windows, final loss %.6g", len(samples), report.final_loss)
    return model, report, len(samples)


def teacher_matches(regions: list[Region], inputs: Inputs, min_iou: float
                    ) -> list[tuple[Region, np.ndarray]]:
    by_stream: dict[str, list] = {}
    for r in inputs.rois:
        if r.roi_id in inputs.teachers:
            by_stream.setdefault(r.stream_id, []).append(r)
    out = []
    for reg in regions:
        t = reg.window[1] - 1
        cands = [(r, r.box) for r in by_stream.get(reg.stream_id, [])
                 if r.window is None or r.window[0] <= t < r.window[1]]
        hit = _best_match(reg.box, cands, min_iou)
        if hit is not None:
            out.append((reg, inputs.teachers[hit.roi_id]))
    return out


def _train_regions(config, inputs, model):
    regions = []
    for entry, stream, gt in inputs.split("train"):
        regions.extend(extract_regions(entry.stream_id, stream, gt,
                                       segment_stream(stream, model, config.slicer), config))
    return regions


def stage_distill(config: PipelineConfig, inputs: Inputs, model: SlicerModel
                  ) -> tuple[ProjectionHead, list[float], int]:
    regions = _train_regions(config, inputs, model)
    matched = teacher_matches(regions, inputs, config.distill.match_iou)
    if len(matched) < 2:
        raise ValueError(f"only {len(matched)} regions matched a teacher embedding")
    samples = [DistillSample(r.pooled, r.attention, t) for r, t in matched]
    out_dim = config.distill.out_dim or inputs.teachers.dim
    head = ProjectionHead.init(samples[0].pooled.size, out_dim, config.seeds["head_init"])
    head, history = train_projection(head, samples, config.distill.config,
                                     config.distill.lr, config.distill.iters)
    log.info("distill: %d samples, loss %.6g -> %.6g", len(samples), history[0], history[-1])
    return head, history, len(samples)


def build_text_bank(inputs: Inputs, seed: int) -> TextEmbeddingBank:
    by_name = {inputs.labels.names[i]: inputs.text[i] for i in inputs.labels.names
               if i in inputs.text}
    missing = [n for n in inputs.labels.splits if n not in by_name]
    if missing:
        raise ValueError(f"no text embedding for classes {missing}")
    base = inputs.labels.names_in("base")
    novel = inputs.labels.names_in("novel")
    return TextEmbeddingBank(base, np.stack([by_name[n] for n in base]), novel,
                             np.stack([by_name[n] for n in novel]) if novel else None,
                             prompt_template=inputs.labels.prompt_template, seed=seed)


def label_regions(regions: list[Region], gts: dict[str, GroundTruth], labels: LabelMap,
                  min_iou: float) -> list[str]:
    """Base-class name of the matching GT object, else background."""
    out = []
    for reg in regions:
        objs = gts[reg.stream_id].boxes_at(reg.window[1] - 1)
        hit = _best_match(reg.box, [(o, o.box) for o in objs], min_iou)
        name = labels.names.get(hit.class_id) if hit is not None else None
        out.append(name if name is not None and labels.splits[name] == "base" else BACKGROUND)
    return out


def stage_train_head(config: PipelineConfig, inputs: Inputs, model: SlicerModel,
                     head: ProjectionHead) -> tuple[ProjectionHead, TextEmbeddingBank, list[float]]:
    """Jointly fit ``e_bg`` and the projection on text + distillation losses."""
    h = config.head
    bank = build_text_bank(inputs, config.seeds["background"])
    regions = _train_regions(config, inputs, model)
    if not regions:
        raise ValueError("no proposals in the training streams")
    gts = {e.stream_id: gt for e, _, gt in inputs.streams}
    names = label_regions(regions, gts, inputs.labels, h.match_iou)
    pooled = np.stack([r.pooled for r in regions])
    matched = teacher_matches(regions, inputs, config.distill.match_iou)
    use_distill = h.distill_weight > 0 and len(matched) >= 2
    history = []
    for _ in range(h.iters):
        emb = embed_pooled(head, pooled)
        props = [LabeledProposal(e, n) for e, n in zip(emb, names)]
        loss = text_loss(props, bank, h.tau)
        d_bg, d_e = grad_text_loss(props, bank, h.tau, wrt_regions=True)
        d_w, d_b = head_backward(head, pooled, d_e)
        if use_distill:
            students = [(RegionEmbedding(embed_pooled(head, r.pooled), r.box, r.pooled),
                         r.attention) for r, _ in matched]
            teachers = [t for _, t in matched]
            scale = h.distill_weight / len(matched)
            loss += scale * f2e_loss(students, teachers, config.distill.config)
            g_w, g_b = grad_f2e(students, teachers, head, config.distill.config)
            d_w, d_b = d_w + scale * g_w, d_b + scale * g_b
        history.append(float(loss))
        bank.e_bg = _unit(bank.e_bg - h.lr * d_bg)
        if h.train_projection:
            head = ProjectionHead(head.weight - h.lr * d_w, head.bias - h.lr * d_b)
    log.info("train-head: %d regions, loss %.6g -> %.6g", len(regions), history[0], history[-1])
    return head, bank, history


def stage_infer(config: PipelineConfig, inputs: Inputs, model: SlicerModel,
                head: ProjectionHead, bank: TextEmbeddingBank
                ) -> tuple[list[DetectionRecord], list[GTRecord]]:
    dets, gts = [], []
    for entry, stream, gt in inputs.split("eval"):
        segments = segment_stream(stream, model, config.slicer)
        for k, (t_a, t_b) in enumerate(segments):
            for obj in gt.boxes_at(t_b - 1):
                gts.append(GTRecord(entry.stream_id, k, obj.box, inputs.labels.names[obj.class_id]))
        regions = extract_regions(entry.stream_id, stream, gt, segments, config)
        by_segment: dict[int, list] = {}
        for reg in regions:
            label, score = classify(embed_pooled(head, reg.pooled), bank, config.head.tau,
                                    config.head.score_threshold)
            if label != BACKGROUND:
                by_segment.setdefault(reg.segment, []).append((reg.box, label, score))
        for k in sorted(by_segment):
            cands = by_segment[k]
            for label in sorted({c[1] for c in cands}):
                group = [c for c in cands if c[1] == label]
                keep = nms([c[0] for c in group], [c[2] for c in group], config.head.nms_iou)
                dets.extend(DetectionRecord(entry.stream_id, k, group[i][0], label, group[i][2])
                            for i in keep)
    return dets, gts


def class_splits(labels: LabelMap) -> dict[str, str]:
    return dict(labels.splits)


def stage_eval(dets, gts, labels: LabelMap) -> MapReport:
    return eval_map(dets, gts, classes=class_splits(labels))


# ---------------------------------------------------------------------------
# Manifest, serialization, full run
# ---------------------------------------------------------------------------

def run_manifest(config: PipelineConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, "package": "evslice", "version": __version__,
            "python": platform.python_version(), "numpy": np.__version__,
            "seeds": dict(sorted(config.seeds.items())), "config_hash": config.config_hash}


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def detections_json(dets: list[DetectionRecord]) -> dict:
    return {"schema_version": SCHEMA_VERSION, "detections": [d.to_json() for d in dets]}


def gt_json(gts: list[GTRecord]) -> dict:
    return {"schema_version": SCHEMA_VERSION, "ground_truth": [g.to_json() for g in gts]}


def report_json(report: MapReport, manifest: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, **report.to_json(), "manifest": manifest}


def write_atomic(files: dict[Path, str]) -> None:
    """Write every file through a temporary sibling, then rename into place."""
    staged = []
    try:
        for path, text in files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            staged.append((tmp, path))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


@dataclass(frozen=True)
class PipelineResult:
    detections: list[DetectionRecord]
    report: MapReport
    manifest: dict
    files: dict = field(repr=False, default_factory=dict)


def _stage(name, fn, *args):
    log.info("stage %s", name)
    try:
        return fn(*args)
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - reported with stage context
        raise StageError(name, exc) from exc


def run_pipeline(config: PipelineConfig, write: bool = True) -> PipelineResult:
    """Run every stage in memory; outputs are written only if all succeed."""
    inputs = _stage("load", load_inputs, config)
    model, slicer_report, _ = _stage("train-slicer", stage_train_slicer, config, inputs)
    distilled, distill_hist, _ = _stage("distill", stage_distill, config, inputs, model)
    head, bank, head_hist = _stage("train-head", stage_train_head, config, inputs, model,
                                   distilled)
    dets, gts = _stage("infer", stage_infer, config, inputs, model, head, bank)
    report = _stage("eval", stage_eval, dets, gts, inputs.labels)
    manifest = run_manifest(config)
    out = config.output_dir
    files = {
        out / "slicer_model.json": model_to_json(model, config.slicer.lif) + "\n",
        out / "projection_head.json": head_json(distilled, distill_hist),
        out / "text_bank.json": bank_json(head, bank, head_hist),
        out / "detections.json": dumps(detections_json(dets)),
        out / "ground_truth.json": dumps(gt_json(gts)),
        out / "report.json": dumps(report_json(report, manifest)),
    }
    if write:
        write_atomic(files)
    return PipelineResult(dets, report, manifest, files)


# ---------------------------------------------------------------------------
# Stage artifacts (read back by the CLI)
# ---------------------------------------------------------------------------

def head_json(head: ProjectionHead, history: list[float]) -> str:
    return dumps({"schema_version": SCHEMA_VERSION, "head": head.to_json(),
                  "loss_first": history[0], "loss_last": history[-1]})


def bank_json(head: ProjectionHead, bank: TextEmbeddingBank, history: list[float]) -> str:
    return dumps({"schema_version": SCHEMA_VERSION, "head": head.to_json(),
                  "e_bg": bank.e_bg.tolist(), "loss_first": history[0],
                  "loss_last": history[-1]})


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_stage_head(path) -> ProjectionHead:
    return ProjectionHead.from_json(read_json(path)["head"])


def load_stage_bank(path, inputs: Inputs, seed: int) -> tuple[ProjectionHead, TextEmbeddingBank]:
    d = read_json(path)
    bank = build_text_bank(inputs, seed)
    bank.e_bg = np.array(d["e_bg"], dtype=np.float64)
    return ProjectionHead.from_json(d["head"]), bank


def load_detections(path) -> list[DetectionRecord]:
    d = read_json(path)
    rows = d["detections"] if isinstance(d, dict) else d
    return [DetectionRecord.from_json(r) for r in rows]


def load_gt_records(path) -> list[GTRecord]:
    d = read_json(path)
    rows = d["ground_truth"] if isinstance(d, dict) else d
    return [GTRecord.from_json(r) for r in rows]
