import json
import math

import numpy as np
import pytest

from conftest import make_experiment
from roimae.harness import (
    ExperimentError,
    ExperimentReport,
    ReportRow,
    dump_config,
    emit_report,
    eval_mask_seed,
    fit_to_patch,
    load_config,
    load_report,
    model_path,
    prepare_data,
    render_report,
    repeat_seed,
    run_experiment,
)
from roimae.mae import forward, load_model, masked_mse
from roimae.masking import apply_mask, generate_mask, parse_strategy
from roimae.volume import LabelVolume, Mask3D, Volume4D


def test_smoke_eight_subjects(tmp_path):
    cfg = make_experiment(tmp_path, ["random-tube:0.1"], n_per_class=4)
    report = run_experiment(cfg)
    assert len(report.rows) == 1
    row = report.rows[0]
    assert row.status == "ok", row.error
    for value in (row.recon_loss, row.final_epoch_loss, row.acc, row.masked_percent):
        assert math.isfinite(value)
    # one test subject: AUC is undefined and reported as missing
    assert row.aucroc is None
    for name in ("report.csv", "report.json", "report.md", "splits.csv"):
        assert (cfg.out_dir / name).exists()


@pytest.fixture(scope="module")
def two_strategy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    cfg = make_experiment(root, ["random-tube:0.1", "roi:limbic:1.0"], n_per_class=10, repeats=2)
    return cfg, run_experiment(cfg)


def test_rows_per_strategy_and_seed(two_strategy_run):
    cfg, report = two_strategy_run
    assert [(r.strategy, r.repeat) for r in report.rows] == [
        ("random-tube:0.1", 0), ("random-tube:0.1", 1), ("roi:LimbicRegions:1.0", 0), ("roi:LimbicRegions:1.0", 1)
    ]
    assert report.all_ok
    # both strategies share a repeat's sub-seed (same init and data order)
    assert report.rows[0].sub_seed == report.rows[2].sub_seed == repeat_seed(cfg.seed, 0)
    assert report.rows[0].sub_seed != report.rows[1].sub_seed


def test_recon_loss_recomputable_from_saved_model(two_strategy_run):
    cfg, report = two_strategy_run
    data = prepare_data(cfg)
    split = dict(line.split(",") for line in (cfg.out_dir / "splits.csv").read_text().split()[1:])
    test_idx = [i for i, s in enumerate(data.ids) if split[s] == "test"]
    for row in report.rows:
        strategy = parse_strategy(row.strategy)
        model = load_model(model_path(cfg.out_dir, strategy, row.repeat))
        losses = []
        for j in test_idx:
            mask = generate_mask(strategy.with_seed(eval_mask_seed(row.sub_seed, j)), data.volumes[j].dims,
                                 data.atlas, data.brains[j], data.grouping)
            losses.append(masked_mse(forward(model, apply_mask(data.volumes[j], mask)), data.volumes[j], mask))
        assert abs(np.mean(losses) - row.recon_loss) <= 1e-9


def test_roi_row_masks_only_target_region(two_strategy_run):
    _, report = two_strategy_run
    roi = [r for r in report.rows if r.strategy.startswith("roi")][0]
    # target region 6 is one 3x3x3 cell of the 6^3 brain block, all 8 frames
    assert roi.masked_voxels == 27 * 8
    assert roi.brain_percent == pytest.approx(100 * 27 / 216)


def test_rerun_byte_identical_csv(two_strategy_run, tmp_path):
    cfg, _ = two_strategy_run
    first = (cfg.out_dir / "report.csv").read_bytes()
    cfg.out_dir = tmp_path / "again"
    run_experiment(cfg)
    assert (cfg.out_dir / "report.csv").read_bytes() == first


def test_parallel_workers_match_serial(two_strategy_run, tmp_path):
    cfg, report = two_strategy_run
    cfg.out_dir = tmp_path / "par"
    parallel = run_experiment(cfg, workers=2)
    assert parallel == report


def test_failed_cell_does_not_stop_others(tmp_path):
    # the phantom grouping has no subcortical group beyond region 7; use an absent one
    cfg = make_experiment(tmp_path, ["random-tube:0.1", "roi:frontal"], n_per_class=4)
    (cfg.grouping).write_text("LimbicRegions: 6\n")
    report = run_experiment(cfg)
    assert [r.status for r in report.rows] == ["ok", "error"]
    assert "FrontalLobe" in report.rows[1].error
    assert not report.all_ok
    assert "error" in (cfg.out_dir / "report.csv").read_text()


def test_missing_inputs(tmp_path):
    cfg = make_experiment(tmp_path, ["random-tube:0.1"])
    cfg.atlas = tmp_path / "nope.nii"
    with pytest.raises(ExperimentError):
        run_experiment(cfg)
    with pytest.raises(ExperimentError):
        make_experiment(tmp_path / "b", [])


def _row(**kw):
    base = dict(strategy="random-tube:0.1", label="Random/Tube (10%)", repeat=0, sub_seed=1, recon_loss=0.5,
                final_epoch_loss=0.6, acc=0.75, aucroc=0.8, masked_voxels=10, masked_percent=1.0, brain_percent=2.0)
    base.update(kw)
    return ReportRow(**base)


def test_emit_report_formats(tmp_path):
    report = ExperimentReport([_row()])
    emit_report(report, "csv", tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("strategy,label,repeat")
    emit_report(report, "json", tmp_path / "r.json")
    assert load_report(tmp_path / "r.json") == report
    md = render_report(report, "markdown")
    assert md.splitlines()[0] == "| Mask | Reconstruction loss* | ACC | AUCROC |"
    assert "| Random/Tube (10%) | 0.5000 | 75.00% | 0.800 |" in md
    with pytest.raises(ExperimentError):
        emit_report(report, "xml", tmp_path / "r.xml")
    assert not (tmp_path / "r.xml").exists()


def test_emit_empty_report_is_error(tmp_path):
    failed = ExperimentReport([ReportRow("random-tube:0.1", "x", 0, 1, status="error", error="boom")])
    with pytest.raises(ExperimentError):
        emit_report(failed, "csv", tmp_path / "r.csv")
    assert not (tmp_path / "r.csv").exists()


def test_json_round_trip_with_missing_auc(tmp_path):
    report = ExperimentReport([_row(aucroc=None), _row(repeat=1, acc=0.5)])
    emit_report(report, "json", tmp_path / "r.json")
    assert load_report(tmp_path / "r.json") == report
    doc = json.loads((tmp_path / "r.json").read_text())
    agg = doc["aggregate"][0]
    assert agg["n"] == 2 and agg["acc_mean"] == 0.625
    assert agg["acc_std"] == pytest.approx(np.std([0.75, 0.5], ddof=1))
    assert agg["aucroc_mean"] == 0.8


def test_config_yaml_round_trip(tmp_path):
    cfg = make_experiment(tmp_path, ["random-tube:0.1", "roi:limbic:0.5"], repeats=3)
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.train == cfg.train and back.preprocess == cfg.preprocess
    assert back.strategies == cfg.strategies and back.repeats == 3
    assert back.atlas == cfg.atlas


def test_config_relative_paths_and_unknown_keys(tmp_path):
    (tmp_path / "c.yaml").write_text("data_dir: d\nstrategies: [random-tube:0.1]\ntrain: {epochs: 3}\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.data_dir == tmp_path / "d" and cfg.atlas == tmp_path / "d" / "atlas.nii"
    assert cfg.train.epochs == 3
    (tmp_path / "bad.yaml").write_text("strategies: [random-tube:0.1]\ntrain: {epoch: 3}\n")
    with pytest.raises(ExperimentError):
        load_config(tmp_path / "bad.yaml")


def test_fit_to_patch():
    vol = Volume4D(np.ones((5, 6, 7, 10)))
    labels = LabelVolume(np.ones((5, 6, 7), dtype=np.uint16))
    brain = Mask3D(np.ones((5, 6, 7), dtype=bool))
    out, lab, br = fit_to_patch(vol, labels, brain, (4, 4, 4, 4))
    assert out.data.shape == (8, 8, 8, 8)
    assert lab.labels.shape == (8, 8, 8) and br.popcount == 5 * 6 * 7
    assert out.data.sum() == 5 * 6 * 7 * 8
    with pytest.raises(ExperimentError):
        fit_to_patch(vol, None, None, (1, 1, 1, 11))
