import json

import numpy as np
import pytest

from pointpose.cli import main
from pointpose.exceptions import CompatibilityError, InvalidParameter
from pointpose.ingestion import Annotation, FrameManifest, crop_by_bbox, load_depth, load_rgb, save_depth
from pointpose.pipeline import (
    DistanceTrigger,
    PipelineConfig,
    build_database,
    evaluate,
    load_frames,
    process_annotation,
    run,
    run_frame,
)
from pointpose.recognition import LogisticModel, ModelDatabase, build_view
from pointpose.synthetic import write_synthetic_dataset

from oracles import PRC_HAND_AUC


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifest = write_synthetic_dataset(str(root), n_instances=3, n_views=3, n_frames=2, seed=1)
    assert main(["build-db", "--views", str(root / "views"), "--out", str(root / "db")]) == 0
    assert main(["train", "--manifest", manifest, "--out", str(root / "model.bin")]) == 0
    frames, K = load_frames([manifest])
    return {"root": root, "manifest": manifest, "frames": frames, "K": K,
            "db": ModelDatabase.load(root / "db"), "model": LogisticModel.load(root / "model.bin")}


def strip_timing(doc):
    for r in doc["records"]:
        r.pop("stage_timings")
    return json.dumps(doc, sort_keys=True)


def test_config_defaults_and_nested_json(tmp_path):
    cfg = PipelineConfig()
    assert (cfg.leaf_m, cfg.fpfh_radius_m, cfg.ransac_max_iterations, cfg.ransac_validation,
            cfg.fgr_iterations, cfg.icp_max_dist_m, cfg.icp_max_iterations) == (
        0.01, 0.05, 4_000_000, 500, 100, 0.01, 30)
    (tmp_path / "c.json").write_text(json.dumps({"coarse_method": "FGR", "ransac": {"max_iterations": 10},
                                                 "icp": {"max_dist_m": 0.02}}))
    loaded = PipelineConfig.load(tmp_path / "c.json", seed=7, leaf_m=None)
    assert loaded.coarse_method == "FGR" and loaded.ransac_max_iterations == 10
    assert loaded.icp_max_dist_m == 0.02 and loaded.seed == 7 and loaded.leaf_m == 0.01
    assert PipelineConfig.from_dict(loaded.to_dict()) == loaded


@pytest.mark.parametrize("bad", [{"leaf_m": 0}, {"min_correspondences": 2}, {"execution_mode": "Fast"},
                                 {"coarse_method": "ICP"}, {"nope": 1}, {"fgr": {"x": 1}}])
def test_config_validation(bad):
    with pytest.raises(InvalidParameter):
        PipelineConfig.from_dict(bad)


def run_mode(dataset, mode, **kw):
    cfg = PipelineConfig(execution_mode=mode, **kw)
    return run(dataset["frames"], dataset["db"], dataset["model"], cfg, dataset["K"])


def test_classify_only_gating(dataset):
    recs = run_mode(dataset, "ClassifyOnly")
    assert len(recs) == 6
    for r in recs:
        assert r.predicted_label == r.instance_label
        assert set(r.stage_timings) == {"classify"}
        assert r.transform is None and r.est_box is None and r.method is None


def test_full_mode_detects_everything(dataset):
    recs = run_mode(dataset, "Full")
    assert all(r.error is None for r in recs)
    assert all(set(r.stage_timings) == {"classify", "coarse", "icp"} for r in recs)
    assert sum(r.is_true_positive for r in recs) == 6
    report = evaluate(recs, dataset["frames"])
    assert report["auc"] == pytest.approx(1.0) and report["counts"]["classification_accuracy"] == 1.0


def test_modes_are_monotone(dataset):
    coarse = run_mode(dataset, "Coarse")
    full = run_mode(dataset, "Full")
    for c, f in zip(coarse, full):
        cd = {k for k, v in c.to_dict().items() if v is not None}
        fd = {k for k, v in f.to_dict().items() if v is not None}
        assert cd <= fd and "icp" not in c.stage_timings
        assert c.view_id == f.view_id and c.correspondence_count == f.correspondence_count


def test_scene_equal_to_database_view(dataset):
    frame = dataset["frames"][0]
    ann = frame.annotations[0]
    rgb, depth, K = load_rgb(frame.rgb), load_depth(frame.depth), dataset["K"]
    crop = crop_by_bbox(depth, rgb, K, ann.bbox)
    db = ModelDatabase({ann.label: [build_view(ann.label, "self", crop)]})
    cfg = PipelineConfig(ransac_max_iterations=200_000)
    rec = process_annotation(frame.frame_id, ann, 0, rgb, depth, K, db, dataset["model"], cfg, "Full")
    assert rec.error is None and rec.is_true_positive and rec.mir >= 0.90


def test_empty_depth_box_is_a_recorded_miss(dataset, tmp_path):
    frame = dataset["frames"][0]
    depth = load_depth(frame.depth).copy()
    x, y, w, h = frame.annotations[0].bbox
    depth[y:y + h, x:x + w] = 0
    save_depth(tmp_path / "d.png", depth)
    holed = FrameManifest("holed", frame.rgb, str(tmp_path / "d.png"), frame.annotations)
    recs = run_frame(holed, dataset["db"], dataset["model"], PipelineConfig(), dataset["K"])
    assert recs[0].error == "EmptyCrop" and not recs[0].is_true_positive
    assert recs[1].error is None


def test_wrong_label_is_false_positive(dataset):
    frame = dataset["frames"][0]
    ann = frame.annotations[0]
    wrong = LogisticModel(np.zeros((1 + 1, dataset["model"].dim)), [0.0, 1.0],
                          [ann.label, frame.annotations[1].label])
    rgb, depth = load_rgb(frame.rgb), load_depth(frame.depth)
    rec = process_annotation(frame.frame_id, ann, 0, rgb, depth, dataset["K"], dataset["db"], wrong,
                             PipelineConfig(), "Full")
    assert rec.predicted_label != ann.label and not rec.is_true_positive


def test_missing_images_become_error_records(dataset):
    frame = FrameManifest("gone", "/nonexistent/rgb.png", "/nonexistent/d.png", [Annotation("x", (0, 0, 5, 5))])
    recs = run_frame(frame, dataset["db"], dataset["model"], PipelineConfig(), dataset["K"])
    assert recs[0].error is not None


def test_distance_trigger(dataset):
    near = DistanceTrigger(max_depth_m=5.0)
    far = DistanceTrigger(max_depth_m=0.1)
    frame = dataset["frames"][0]
    depth = load_depth(frame.depth)
    assert near(frame, depth, None) == "Full" and far(frame, depth, None) == "ClassifyOnly"
    recs = run(dataset["frames"], dataset["db"], dataset["model"], PipelineConfig(), dataset["K"], far)
    assert all(r.mode == "ClassifyOnly" for r in recs)


def test_incompatible_database(dataset):
    with pytest.raises(CompatibilityError):
        run_mode(dataset, "Full", leaf_m=0.02)


@pytest.mark.parametrize("method", ["RANSAC", "FGR"])
def test_deterministic_across_runs_and_workers(dataset, tmp_path, method):
    root = dataset["root"]
    outs = []
    for i, workers in enumerate(["1", "1", "3"]):
        out = tmp_path / f"r{i}.json"
        assert main(["run", "--manifest", dataset["manifest"], "--db", str(root / "db"),
                     "--model", str(root / "model.bin"), "--out", str(out),
                     "--coarse-method", method, "--n-workers", workers]) == 0
        outs.append(json.loads(out.read_text()))
    assert [d["config"]["n_workers"] for d in outs] == [1, 1, 3]
    for d in outs:
        d["config"]["n_workers"] = None
    docs = [strip_timing(d) for d in outs]
    assert docs[0] == docs[1] == docs[2]


def test_cli_evaluate_and_bench(dataset, tmp_path, capsys):
    root = dataset["root"]
    rec = tmp_path / "rec.json"
    main(["run", "--manifest", dataset["manifest"], "--db", str(root / "db"), "--model",
          str(root / "model.bin"), "--out", str(rec), "--execution-mode", "Coarse"])
    assert main(["evaluate", "--records", str(rec), "--manifest", dataset["manifest"],
                 "--out", str(tmp_path / "rep.json"), "--csv", str(tmp_path / "prc.csv")]) == 0
    report = json.loads((tmp_path / "rep.json").read_text())
    assert report["auc"] == pytest.approx(1.0) and set(report["timing"]["RANSAC"]) == {"classify", "classify+coarse"}
    assert (tmp_path / "prc.csv").read_text().startswith("threshold,precision,recall")
    assert main(["bench", "--out", str(tmp_path / "b.json"), "--seeds", "1", "--views", "2",
                 "--ransac-max-iterations", "20000"]) == 0
    bench = json.loads((tmp_path / "b.json").read_text())
    assert bench["summary"]["speed_ratio_ransac_over_fgr"] > 0
    assert "bench:" in capsys.readouterr().out


def test_cli_evaluate_hand_case_and_empty(dataset, tmp_path):
    counts, tps = (10, 8, 6, 5, 4), (True, False, True, False, True)
    recs = [{"frame_id": "f", "instance_label": "a", "correspondence_count": c, "is_true_positive": t}
            for c, t in zip(counts, tps)]
    frame = dataset["frames"][0]
    four = FrameManifest("f", frame.rgb, frame.depth, [Annotation("a", (0, 0, 1, 1))] * 4)
    from pointpose.ingestion import write_manifest
    write_manifest(tmp_path / "m.json", [four], dataset["K"])
    for name, rows, auc in (("hand", recs, float(PRC_HAND_AUC)), ("empty", [], 0.0)):
        (tmp_path / f"{name}.json").write_text(json.dumps({"records": rows}))
        assert main(["evaluate", "--records", str(tmp_path / f"{name}.json"), "--manifest",
                     str(tmp_path / "m.json"), "--out", str(tmp_path / f"{name}-rep.json")]) == 0
        assert json.loads((tmp_path / f"{name}-rep.json").read_text())["auc"] == pytest.approx(auc, abs=1e-15)


def test_build_database_skips_bad_views_and_rejects_empty(dataset, tmp_path):
    views = dataset["root"] / "views"
    (tmp_path / "v" / "a").mkdir(parents=True)
    (tmp_path / "v" / "a" / "v0.ply").write_bytes((views / "obj00" / "view00.ply").read_bytes())
    (tmp_path / "v" / "a" / "broken.ply").write_text("garbage")
    log = []
    db = build_database(tmp_path / "v", PipelineConfig(), tmp_path / "db", log.append)
    assert [v.view_id for v in db.views("a")] == ["v0"] and len(log) == 1
    (tmp_path / "v" / "b").mkdir()
    with pytest.raises(InvalidParameter):
        build_database(tmp_path / "v", PipelineConfig(), tmp_path / "db2")


def test_cli_hard_errors_exit_nonzero(tmp_path):
    assert main(["build-db", "--views", str(tmp_path / "none"), "--out", str(tmp_path / "db")]) != 0
    with pytest.raises(SystemExit):
        main(["run"])


def test_matching_options_reach_the_estimators():
    from pointpose.recognition import make_coarse_registration
    cfg = PipelineConfig(coarse_method="FGR", fgr_tuple_ratio=0.8, mutual_matching=False)
    est = make_coarse_registration(cfg.coarse_method, cfg.coarse_params())
    assert est.tuple_ratio == 0.8 and est.mutual is False
    ransac = make_coarse_registration("RANSAC", PipelineConfig(mutual_matching=True).coarse_params())
    assert ransac.mutual is True
    assert make_coarse_registration("RANSAC", PipelineConfig().coarse_params()).mutual is False
    with pytest.raises(InvalidParameter):
        PipelineConfig(fgr_tuple_ratio=1.5)
