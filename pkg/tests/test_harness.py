import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evslice.boxes import BoxParams, iou, nms
from evslice.events import EventStream, to_voxel_grid
from evslice.harness import cli
from evslice.harness import pipeline as pl
from evslice.harness.dataset import load_dataset_index, load_label_map, write_dataset
from evslice.harness.detector import ToyDetector, toy_detect_loss
from evslice.harness.metrics import IOU_50_95, DetectionRecord, GTRecord, eval_map
from evslice.slicer import LifConfig, SlicerModel, save_model
from evslice.synthetic import perimeter

import oracles

FIXTURES = Path(__file__).parent / "fixtures"
SMALL_DATASET = {"seed": 0, "duration": 20000, "train_streams": 2, "eval_streams": 1}

boxes = st.builds(BoxParams, st.floats(-20, 20), st.floats(-20, 20), st.floats(0.1, 15),
                  st.floats(0.1, 15))


def corners(x0, y0, x1, y1):
    return BoxParams.from_corners(x0, y0, x1, y1)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return write_dataset(SMALL_DATASET, root)


class TestIou:
    def test_identical(self):
        assert iou(BoxParams(3, 3, 2, 5), BoxParams(3, 3, 2, 5)) == 1.0

    def test_disjoint(self):
        assert iou(corners(0, 0, 1, 1), corners(2, 2, 3, 3)) == 0.0

    def test_half_overlap_unit_squares(self):
        assert iou(corners(0, 0, 1, 1), corners(0.5, 0, 1.5, 1)) == pytest.approx(1 / 3)

    @settings(max_examples=300, deadline=None)
    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0
        assert iou(a, a) == 1.0

    def test_rejects_degenerate_box(self):
        with pytest.raises(ValueError):
            BoxParams(0, 0, 0, 1)


class TestNms:
    def test_suppresses_overlap(self):
        b = [corners(0, 0, 10, 10), corners(1, 1, 11, 11), corners(20, 20, 30, 30)]
        assert nms(b, [0.9, 0.8, 0.7]) == [0, 2]

    def test_tie_keeps_lower_index(self):
        b = [corners(0, 0, 10, 10), corners(0, 0, 10, 10)]
        assert nms(b, [0.5, 0.5]) == [0]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(boxes, min_size=1, max_size=12), st.data())
    def test_kept_boxes_do_not_overlap(self, bs, data):
        scores = data.draw(st.lists(st.floats(0, 1), min_size=len(bs), max_size=len(bs)))
        keep = nms(bs, scores, 0.5)
        assert keep
        for i in keep:
            for j in keep:
                if i != j:
                    assert iou(bs[i], bs[j]) <= 0.5


def det(box, score, label="car", stream="s0", segment=0):
    return DetectionRecord(stream, segment, box, label, score)


def gt(box, label="car", stream="s0", segment=0):
    return GTRecord(stream, segment, box, label)


class TestEvalMap:
    def test_perfect_detector(self):
        b = corners(0, 0, 5, 5)
        r = eval_map([det(b, 0.9)], [gt(b)])
        assert r.ap50["car"] == 1.0 and r.map_50 == 1.0 and r.map_50_95 == 1.0

    def test_no_detections(self):
        r = eval_map([], [gt(corners(0, 0, 5, 5))])
        assert r.ap50["car"] == 0.0 and r.map_50 == 0.0

    def test_pr_fixture(self):
        dets = pl.load_detections(FIXTURES / "pr_dets.json")
        gts = pl.load_gt_records(FIXTURES / "pr_gt.json")
        ap = eval_map(dets, gts, [0.5]).ap50["car"]
        assert ap == pytest.approx(oracles.PR_FIXTURE_AP, abs=1e-12)

    def test_segments_do_not_cross_match(self):
        b = corners(0, 0, 5, 5)
        r = eval_map([det(b, 0.9, segment=1)], [gt(b, segment=0)])
        assert r.ap50["car"] == 0.0

    def test_classes_without_gt_are_excluded(self):
        b = corners(0, 0, 5, 5)
        r = eval_map([det(b, 0.9), det(b, 0.8, label="truck")], [gt(b)])
        assert r.ap50 == {"car": 1.0}
        assert r.counts["truck"] == {"detections": 1, "ground_truth": 0}

    def test_split_aggregates_and_unknown_labels(self):
        b = corners(0, 0, 5, 5)
        r = eval_map([det(b, 0.9)], [gt(b)], classes={"car": "base", "truck": "novel"})
        assert r.splits == {"base": {"map_50": 1.0, "map_50_95": 1.0, "classes": 1}}
        with pytest.raises(ValueError, match="unknown class"):
            eval_map([det(b, 0.9, label="bus")], [gt(b)], classes={"car": "base"})

    def test_rejects_out_of_range_score(self):
        with pytest.raises(ValueError):
            det(corners(0, 0, 1, 1), 1.5)

    def test_adding_correct_detection_never_lowers_ap(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            gts = [gt(corners(x, y, x + w, y + h), segment=int(s))
                   for x, y, w, h, s in zip(rng.integers(0, 50, 6), rng.integers(0, 50, 6),
                                            rng.integers(3, 12, 6), rng.integers(3, 12, 6),
                                            rng.integers(0, 2, 6))]
            dets = []
            for _ in range(int(rng.integers(0, 8))):
                g = gts[int(rng.integers(len(gts)))]
                jitter = rng.normal(0, 1.5, 4)
                box = BoxParams(g.box.x + jitter[0], g.box.y + jitter[1],
                                max(g.box.w + jitter[2], 0.5), max(g.box.h + jitter[3], 0.5))
                dets.append(det(box, float(rng.uniform()), segment=g.segment))
            thr = float(rng.choice(IOU_50_95))
            before = eval_map(dets, gts, [thr])
            matched = {j for d in dets for j, g in enumerate(gts)
                       if g.segment == d.segment and iou(d.box, g.box) >= thr}
            free = [g for j, g in enumerate(gts) if j not in matched]
            if not free:
                continue
            g = free[int(rng.integers(len(free)))]
            after = eval_map(dets + [det(g.box, float(rng.uniform()), segment=g.segment)],
                             gts, [thr])
            assert after.ap50_95["car"] >= before.ap50_95["car"] - 1e-12


class TestToyDetector:
    def _grid(self, pixels, w=32, h=24):
        xs, ys = zip(*pixels) if pixels else ((), ())
        s = EventStream.from_arrays(list(xs), list(ys), [0] * len(xs), [1] * len(xs), w, h, 0, 10)
        return to_voxel_grid(s, bins=2)

    def test_perfect_coverage(self):
        g = corners(2, 3, 10, 9)
        assert toy_detect_loss(self._grid([(2, 3)]), [g], [g]) == 0.0

    def test_empty_segment(self):
        assert toy_detect_loss(self._grid([]), [], [corners(0, 0, 2, 2)]) == 1.0

    def test_partial_coverage(self):
        a, b = corners(0, 0, 4, 4), corners(10, 10, 14, 14)
        assert toy_detect_loss(self._grid([(1, 1)]), [a], [a, b]) == 0.5

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 31), st.integers(0, 23)), max_size=30),
           st.lists(boxes, max_size=4), st.lists(boxes, max_size=4))
    def test_range(self, pixels, proposals, gt_boxes):
        grid = self._grid(pixels)
        loss = toy_detect_loss(grid, proposals, gt_boxes)
        assert 0.0 <= loss <= 1.0
        assert loss == toy_detect_loss(grid, proposals, gt_boxes)

    def test_proposes_outline_box(self):
        px, py = perimeter(5, 4, 9, 7)
        boxes_ = ToyDetector().propose(self._grid(list(zip(px.tolist(), py.tolist()))))
        assert boxes_ == [corners(5, 4, 14, 11)]

    def test_gap_joins_sparse_outline(self):
        px, py = perimeter(5, 4, 9, 7)
        keep = [(x, y) for i, (x, y) in enumerate(zip(px.tolist(), py.tolist())) if i % 2 == 0]
        assert ToyDetector(gap=1).propose(self._grid(keep)) == [corners(5, 4, 14, 11)]
        assert len(ToyDetector(gap=0, min_pixels=1).propose(self._grid(keep))) > 1

    def test_small_blobs_ignored(self):
        assert ToyDetector(min_pixels=4).propose(self._grid([(1, 1), (2, 1)])) == []


class TestDataset:
    def test_layout(self, small_dataset):
        root = small_dataset.parent
        for name in ("dataset.json", "label_map.json", "text_embeddings.emb",
                     "teacher_embeddings.emb", "rois.json", "pipeline.json"):
            assert (root / name).is_file()
        entries = load_dataset_index(root / "dataset.json")
        assert [e.split for e in entries] == ["train", "train", "eval"]
        stream, truth = entries[0].load()
        assert stream.span == 20000 and len(stream) > 0
        assert truth.boxes_at(0)

    def test_label_map(self, small_dataset):
        labels = load_label_map(small_dataset.parent / "label_map.json")
        assert labels.names_in("base") == ["car", "pedestrian"]
        assert labels.names_in("novel") == ["truck"]

    def test_label_map_rejects_bad_split(self, tmp_path):
        p = tmp_path / "labels.json"
        p.write_text(json.dumps({"classes": [{"name": "a", "index": 1, "split": "x"}]}))
        with pytest.raises(ValueError):
            load_label_map(p)

    def test_deterministic(self, tmp_path):
        a = write_dataset(SMALL_DATASET, tmp_path / "a").parent
        b = write_dataset(SMALL_DATASET, tmp_path / "b").parent
        for p in sorted(a.rglob("*")):
            if p.is_file() and p.name != "pipeline.json":
                assert p.read_bytes() == (b / p.relative_to(a)).read_bytes(), p.name


class TestConfig:
    def _doc(self, root):
        return json.loads((root / "pipeline.json").read_text())

    def test_loads_generated_config(self, small_dataset):
        cfg = pl.load_config(small_dataset)
        assert cfg.slicer.window_us == 20000
        assert len(cfg.config_hash) == 64

    def test_missing_file_names_path(self, small_dataset, tmp_path):
        doc = self._doc(small_dataset.parent)
        doc["paths"]["text_embeddings"] = "nowhere.emb"
        with pytest.raises(pl.ConfigError, match="paths.text_embeddings: file not found"):
            pl.config_from_dict(doc, small_dataset.parent)

    @pytest.mark.parametrize("patch, fragment", [
        ({"extra": 1}, "unknown top-level"),
        ({"slicer": {"n_steps": 16, "window_us": 20001}}, "multiple"),
        ({"slicer": {"bogus": 1}}, "unknown keys"),
        ({"head": {"tau": 0.1, "colour": 1}}, "unknown keys"),
        ({"slicer": {"lif": {"v_th": -1}}}, "v_th"),
        ({"schema_version": 9}, "schema_version"),
    ])
    def test_rejects(self, small_dataset, patch, fragment):
        doc = {**self._doc(small_dataset.parent), **patch}
        with pytest.raises(pl.ConfigError, match=fragment):
            pl.config_from_dict(doc, small_dataset.parent)


class TestPipeline:
    def test_deterministic_in_memory(self, small_dataset):
        cfg = pl.load_config(small_dataset)
        a = pl.run_pipeline(cfg, write=False)
        b = pl.run_pipeline(cfg, write=False)
        assert [str(k) for k in a.files] == [str(k) for k in b.files]
        assert list(a.files.values()) == list(b.files.values())
        assert a.manifest["config_hash"] == cfg.config_hash
        assert a.manifest["seeds"] == cfg.seeds
        assert all(0 <= d.score <= 1 for d in a.detections)

    def test_stage_failure_writes_nothing(self, small_dataset, tmp_path):
        root = small_dataset.parent
        doc = json.loads(small_dataset.read_text())
        bad = tmp_path / "bad.emb"
        bad.write_text("EMB 16 1\n1 nan" + " 0" * 15 + "\n")
        doc["paths"] = {k: str(root / v) for k, v in doc["paths"].items()}
        doc["paths"]["text_embeddings"] = str(bad)
        doc["paths"]["output_dir"] = str(tmp_path / "out")
        cfg = pl.config_from_dict(doc, root)
        with pytest.raises(pl.StageError, match="load"):
            pl.run_pipeline(cfg)
        assert not (tmp_path / "out").exists()


class TestCli:
    def test_help(self, capsys):
        assert cli.main(["--help"]) == 0
        for sub in ("gen-synthetic", "slice", "train-slicer", "distill", "train-head", "infer",
                    "eval", "report"):
            assert sub in capsys.readouterr().out or cli.main([sub, "--help"]) == 0

    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["eval", "--bogus", "x"],
                                      ["eval", "--dets", "a.json"]])
    def test_usage_errors(self, argv):
        assert cli.main(argv) == 1

    def test_eval_on_pr_fixture(self, tmp_path):
        out = tmp_path / "r.json"
        assert cli.main(["eval", "--dets", str(FIXTURES / "pr_dets.json"), "--gt",
                         str(FIXTURES / "pr_gt.json"), "--iou", "0.5", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["ap50"]["car"] == pytest.approx(oracles.PR_FIXTURE_AP, abs=1e-12)
        assert report["schema_version"] == 1

    def test_gen_synthetic_scene(self, tmp_path):
        spec = tmp_path / "scene.json"
        spec.write_text(json.dumps({"width": 32, "height": 24, "duration": 5000, "seed": 1,
                                    "objects": [{"width": 6, "height": 5, "x": 3, "y": 4}]}))
        assert cli.main(["gen-synthetic", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "events.csv").is_file()
        assert (tmp_path / "o" / "ground_truth.json").is_file()

    def test_slice_without_spikes(self, tmp_path, capsys):
        ev = tmp_path / "e.csv"
        ev.write_text("x,y,t,p\n1,1,0,1\n2,2,500,0\n3,3,999,1\n")
        model = tmp_path / "m.json"
        save_model(model, SlicerModel(), LifConfig())
        assert cli.main(["slice", "--events", str(ev), "--model", str(model),
                         "--width", "8", "--height", "8", "--n-steps", "10"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["segments"] == [{"t_start": 0, "t_end": 1000, "events": 3}]

    def test_missing_input_exits_1_without_output(self, small_dataset, tmp_path):
        doc = json.loads(small_dataset.read_text())
        root = small_dataset.parent
        doc["paths"] = {k: str(root / v) for k, v in doc["paths"].items()}
        doc["paths"]["teacher_embeddings"] = str(tmp_path / "missing.emb")
        doc["paths"]["output_dir"] = str(tmp_path / "out")
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(doc))
        assert cli.main(["run", "--config", str(cfg)]) == 1
        assert cli.main(["train-slicer", "--config", str(cfg)]) == 1
        assert not (tmp_path / "out").exists()

    def test_runtime_failure_exits_2(self, small_dataset, tmp_path):
        doc = json.loads(small_dataset.read_text())
        root = small_dataset.parent
        doc["paths"] = {k: str(root / v) for k, v in doc["paths"].items()}
        doc["paths"]["output_dir"] = str(tmp_path / "out")
        doc["slicer"] = {**doc.get("slicer", {}),
                         "optimizer": {"lr": 1e6, "max_iters": 50, "tol": 1e-9}}
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(doc))
        assert cli.main(["train-slicer", "--config", str(cfg)]) == 2
        assert not (tmp_path / "out").exists()
