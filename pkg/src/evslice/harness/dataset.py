"""On-disk synthetic datasets: streams, ground truth, label map and embeddings.

A dataset directory produced by :func:`write_dataset` contains::

    dataset.json            stream index (id, files, split, sensor size)
    events/<id>.csv         events per stream
    gt/<id>.json            ground truth per stream
    label_map.json          classes with index and base/novel split
    text_embeddings.emb     one vector per class, id = class index
    teacher_embeddings.emb  simulated image-encoder vectors, id = roi_id
    rois.json               ROI manifest for the teacher vectors
    pipeline.json           ready-to-run pipeline configuration

Text and teacher vectors stand in for a frozen vision-language model: each
class gets a random unit direction and every teacher crop is its class
direction plus isotropic noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..embeddings import EmbeddingBank, RoiRecord, save_embeddings, save_roi_manifest
from ..events import EventStream, parse_events, write_events
from ..ovd_head import DEFAULT_PROMPT
from ..synthetic import GroundTruth, ObjectSpec, SyntheticSceneSpec, gen_synthetic

DEFAULT_DATASET_SPEC = {
    "sensor": [64, 48],
    "duration": 60000,
    "edge_rate": 1e-3,
    "noise_rate": 0.0,
    "max_speed": 2e-4,
    "tick_us": 500,
    "gt_window_us": 2500,
    "classes": [
        {"name": "car", "split": "base", "width": 16, "height": 8},
        {"name": "pedestrian", "split": "base", "width": 5, "height": 13},
        {"name": "truck", "split": "novel", "width": 22, "height": 11},
    ],
    "objects_per_stream": 2,
    "train_streams": 4,
    "eval_streams": 2,
    "novel_in_train": False,
    "novel_in_eval": False,
    "embedding_dim": 16,
    "teacher_noise": 0.1,
    "prompt_template": DEFAULT_PROMPT,
    "seed": 0,
}


@dataclass(frozen=True)
class StreamEntry:
    stream_id: str
    events: Path
    ground_truth: Path
    split: str
    width: int
    height: int

    def load(self) -> tuple[EventStream, GroundTruth]:
        with open(self.ground_truth) as fh:
            gt = GroundTruth.from_json(json.load(fh))
        stream = parse_events(self.events, "csv", self.width, self.height,
                              t0=0, span=gt.spec.duration)
        return stream, gt


@dataclass(frozen=True)
class LabelMap:
    names: dict[int, str]
    splits: dict[str, str]
    prompt_template: str = DEFAULT_PROMPT

    def names_in(self, split: str) -> list[str]:
        return [self.names[i] for i in sorted(self.names) if self.splits[self.names[i]] == split]

    def to_json(self) -> dict:
        return {"prompt_template": self.prompt_template,
                "classes": [{"name": self.names[i], "index": i,
                             "split": self.splits[self.names[i]]} for i in sorted(self.names)]}


def load_label_map(path) -> LabelMap:
    with open(path) as fh:
        doc = json.load(fh)
    names, splits = {}, {}
    for c in doc["classes"]:
        if c["split"] not in ("base", "novel"):
            raise ValueError(f"{path}: class {c['name']!r} has split {c['split']!r}")
        if int(c["index"]) in names or c["name"] in splits:
            raise ValueError(f"{path}: duplicate class {c['name']!r}")
        names[int(c["index"])] = c["name"]
        splits[c["name"]] = c["split"]
    return LabelMap(names, splits, doc.get("prompt_template", DEFAULT_PROMPT))


def load_dataset_index(path) -> list[StreamEntry]:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    root = path.parent
    return [StreamEntry(s["stream_id"], root / s["events"], root / s["ground_truth"],
                        s["split"], int(s["width"]), int(s["height"]))
            for s in doc["streams"]]


def _random_directions(n: int, dim: int, rng) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _scene(spec: dict, classes: list[dict], rng, seed: int) -> SyntheticSceneSpec:
    width, height = spec["sensor"]
    n = spec["objects_per_stream"]
    band = height // n
    objects = []
    for k in range(n):
        cls = classes[int(rng.integers(len(classes)))]
        if cls["height"] > band - 2:
            raise ValueError(f"class {cls['name']!r} too tall for {n} objects on a "
                             f"{height}-row sensor")
        y = k * band + 1 + int(rng.integers(0, band - 1 - cls["height"]))
        speed = float(rng.uniform(0.25, 1.0) * spec["max_speed"])
        vx = speed if rng.random() < 0.5 else -speed
        x = float(rng.uniform(0, width - cls["width"]))
        objects.append(ObjectSpec(cls["width"], cls["height"], x, float(y), vx, 0.0,
                                  int(cls["index"])))
    return SyntheticSceneSpec(width, height, spec["duration"], tuple(objects),
                              spec["edge_rate"], spec["noise_rate"], seed,
                              spec["tick_us"], spec["gt_window_us"])


def write_dataset(spec: dict, out_dir, window_us: int = 20000) -> Path:
    """Generate every artifact of a synthetic dataset under ``out_dir``.

    Returns the path of the generated ``pipeline.json``.
    """
    spec = {**DEFAULT_DATASET_SPEC, **spec}
    out = Path(out_dir)
    (out / "events").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec["seed"])
    classes = [dict(c, index=i + 1) for i, c in enumerate(spec["classes"])]
    labels = LabelMap({c["index"]: c["name"] for c in classes},
                      {c["name"]: c["split"] for c in classes}, spec["prompt_template"])

    dim = spec["embedding_dim"]
    text = _random_directions(len(classes), dim, rng)
    text_bank = EmbeddingBank.from_mapping({c["index"]: text[i] for i, c in enumerate(classes)})

    streams, rois, teachers = [], [], {}
    plan = [("train", i) for i in range(spec["train_streams"])] + \
           [("eval", i) for i in range(spec["eval_streams"])]
    for n, (split, i) in enumerate(plan):
        allow_novel = spec["novel_in_train"] if split == "train" else spec["novel_in_eval"]
        pool = [c for c in classes if c["split"] == "base" or allow_novel]
        scene = _scene(spec, pool, rng, seed=spec["seed"] * 1000 + n)
        stream, gt = gen_synthetic(scene)
        sid = f"{split}_{i:03d}"
        write_events(stream, out / "events" / f"{sid}.csv", "csv")
        with open(out / "gt" / f"{sid}.json", "w") as fh:
            fh.write(gt.dumps())
        streams.append({"stream_id": sid, "events": f"events/{sid}.csv",
                        "ground_truth": f"gt/{sid}.json", "split": split,
                        "width": scene.width, "height": scene.height})
        if split != "train":
            continue
        for t_a, t_b in gt.windows:
            for obj in gt.boxes_for_segment(t_a, t_b):
                roi_id = len(rois)
                name = labels.names[obj.class_id]
                rois.append(RoiRecord(roi_id, sid, obj.box, labels.splits[name], (t_a, t_b), name))
                noise = rng.standard_normal(dim) * spec["teacher_noise"] / np.sqrt(dim)
                teachers[roi_id] = text[obj.class_id - 1] + noise

    with open(out / "dataset.json", "w") as fh:
        json.dump({"schema_version": 1, "streams": streams}, fh, indent=1, sort_keys=True)
    with open(out / "label_map.json", "w") as fh:
        json.dump(labels.to_json(), fh, indent=1, sort_keys=True)
    save_embeddings(text_bank, out / "text_embeddings.emb")
    save_embeddings(EmbeddingBank.from_mapping(teachers, dim), out / "teacher_embeddings.emb")
    save_roi_manifest(rois, out / "rois.json")

    config = {
        "schema_version": 1,
        "paths": {"dataset": "dataset.json", "teacher_embeddings": "teacher_embeddings.emb",
                  "roi_manifest": "rois.json", "text_embeddings": "text_embeddings.emb",
                  "label_map": "label_map.json", "output_dir": "run"},
        "slicer": {"window_us": window_us},
        "seeds": {"head_init": spec["seed"], "background": spec["seed"]},
    }
    with open(out / "pipeline.json", "w") as fh:
        json.dump(config, fh, indent=1, sort_keys=True)
    return out / "pipeline.json"


def write_scene(spec: SyntheticSceneSpec, out_dir, fmt: str = "csv") -> tuple[Path, Path]:
    """Single-scene variant: ``events.<csv|bin>`` plus ``ground_truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream, gt = gen_synthetic(spec)
    ev_path = out / ("events.bin" if fmt == "binary" else "events.csv")
    write_events(stream, ev_path, fmt)
    gt_path = out / "ground_truth.json"
    with open(gt_path, "w") as fh:
        fh.write(gt.dumps())
    return ev_path, gt_path
