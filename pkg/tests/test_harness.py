import csv
import dataclasses
import hashlib
import math

import numpy as np
import pytest

from spectramorph.cube import DataCube, load_cube, save_cube
from spectramorph.harness import (
    ABLATIONS,
    RC_GRID,
    ExperimentConfig,
    RunRecord,
    StageError,
    ablation_config,
    aggregate_reports,
    config_diff,
    dump_config,
    grid_configs,
    load_config,
    parse_config,
    read_endmembers,
    read_report_csv,
    run_ablation,
    run_fusion,
    run_grid,
    run_oracle,
)
from spectramorph.latent import TrainConfig
from spectramorph.metrics import METRIC_NAMES, QualityReport
from spectramorph.psf import KINDS
from spectramorph.synthetic import planted_scene

TINY = TrainConfig(epochs=2, batch_size=64)


@pytest.fixture(scope="module")
def gt64():
    return planted_scene(64, 64, 16, 5, seed=0, feature_px=6.0).cube


@pytest.fixture(scope="module")
def gt128():
    return planted_scene(128, 128, 16, 5, seed=1, feature_px=10.0).cube


def _cheap(**kw):
    base = dict(K=5, hidden=(16,), train=TINY, eval_region="full")
    base.update(kw)
    return ExperimentConfig(**base)


def _report(rmse, psnr=30.0):
    return QualityReport(rmse, psnr, 0.9, 0.8, 2.0, 3.0)


def test_config_text_round_trip(tmp_path):
    cfg = ExperimentConfig(
        gt_path=str(tmp_path / "gt.hdr"), K=9, psf_kind="moffat", psf_params={"beta": 2.5},
        r=16, c=3, hidden=(64, 32), use_csp=True, srf_paths={3: str(tmp_path / "s3.csv")},
        train=TrainConfig(epochs=7, lr_max=2e-3), oracle_train=TrainConfig(epochs=3),
        rc_grid=((4, 4), (8, 1)), psf_kinds=("gaussian", "delta"), seed=5, hsi_snr_db=27.5,
    )
    back = parse_config(dump_config(cfg))
    assert dump_config(back) == dump_config(cfg)
    assert back.digest() == cfg.digest()
    assert back.hidden == (64, 32) and back.srf_paths == {3: str(tmp_path / "s3.csv")}


def test_config_file_relative_paths(tmp_path):
    (tmp_path / "exp.ini").write_text("[data]\ngt = scenes/gt.hdr\n[model]\nK = 4\nhidden = none\n"
                                      "[train]\nepochs = 3\n[run]\nseed = 9\n")
    cfg = load_config(tmp_path / "exp.ini")
    assert cfg.gt_path == str(tmp_path / "scenes" / "gt.hdr")
    assert cfg.K == 4 and cfg.hidden == () and cfg.train.epochs == 3 and cfg.seed == 9


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        parse_config("[train]\nepoch = 3\n")
    with pytest.raises(ValueError):
        ExperimentConfig(eval_region="middle")


def test_default_grid_covers_all_kinds_and_pairs():
    cfg = ExperimentConfig()
    assert cfg.rc_grid == ((4, 4), (8, 4), (16, 4), (32, 4), (8, 1), (8, 3), (8, 8), (8, 16))
    assert len(cfg.psf_kinds) == 10
    subs = grid_configs(cfg)
    assert len(subs) == 80
    assert {(s.psf_kind, s.r, s.c) for s in subs} == {(k, r, c) for k in KINDS for r, c in RC_GRID}
    assert all(s.csp_enabled == (s.c == 1) for s in subs)


def test_pan_enables_csp_with_default_s(gt64):
    cfg = _cheap(r=8, c=1)
    assert cfg.csp_enabled and cfg.csp_s == 4
    rec = run_fusion(cfg, gt=gt64, write=False)
    assert rec.artifacts["model"].d_in == 1 + 16


def test_identity_pipeline_shapes(gt64):
    cfg = _cheap(r=4, c=4)
    rec = run_fusion(cfg, gt=gt64, write=False)
    assert rec.artifacts["hr_hsi_est"].shape == gt64.shape
    assert rec.artifacts["alle"].bands == 5
    assert set(rec.timings) >= {"unmix", "train", "infer", "metrics"}
    assert rec.report.params == (4 + 1) * 16 + 17 * 5


def test_ingests_observations_without_gt(gt64):
    rec = run_fusion(_cheap(r=4, c=4), gt=gt64, write=False)
    again = run_fusion(_cheap(r=4, c=4), lr_hsi=rec.artifacts["lr_hsi"], hr_msi=rec.artifacts["hr_msi"],
                       srf=rec.artifacts["srf"], write=False)
    assert again.report is None
    assert np.array_equal(again.artifacts["hr_hsi_est"].values, rec.artifacts["hr_hsi_est"].values)


def test_stage_tagged_errors(gt64, tmp_path):
    with pytest.raises(StageError) as exc:
        run_fusion(_cheap(r=4, c=4), gt=gt64, srf=np.ones((3, 4)), write=False)
    assert exc.value.stage == "load"
    with pytest.raises(StageError) as exc:
        run_fusion(_cheap(r=4, c=4, K=40), gt=gt64, write=False)
    assert exc.value.stage == "unmix"
    with pytest.raises(StageError) as exc:
        run_fusion(_cheap(r=4, c=4, eval_region="test"), gt=gt64, write=False)
    assert exc.value.stage == "metrics"
    with pytest.raises(StageError):
        run_fusion(ExperimentConfig(K=5, gt_path=str(tmp_path / "missing.hdr")))


def test_written_run_is_reproducible_and_traceable(gt64, tmp_path):
    cfg = _cheap(r=4, c=4, seed=3)
    run_fusion(dataclasses.replace(cfg, out_dir=str(tmp_path / "a")), gt=gt64)
    run_fusion(dataclasses.replace(cfg, out_dir=str(tmp_path / "b")), gt=gt64)
    names = ["config.snapshot", "report.csv", "endmembers.csv", "model.len", "provenance.txt"]
    for cube in ("lr_hsi", "hr_msi", "hr_hsi_est", "alle"):
        names += [cube + ".hdr", cube + ".bin"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    snap = (tmp_path / "a" / "config.snapshot").read_bytes()
    digest = hashlib.sha256(snap).hexdigest()
    for cube in ("lr_hsi", "hr_msi", "hr_hsi_est", "alle"):
        assert load_cube(tmp_path / "a" / cube).meta["config_sha256"] == digest
    assert parse_config(snap.decode()).digest() == digest
    E = read_endmembers(tmp_path / "a" / "endmembers.csv")
    assert E.shape == (5, 16)
    rep = read_report_csv(tmp_path / "a" / "report.csv")[0]
    assert rep.params == (4 + 1) * 16 + 17 * 5


def test_gt_path_with_out_of_range_values_is_normalized(gt64, tmp_path):
    save_cube(DataCube(gt64.values * 1000 + 5), tmp_path / "raw", dtype="f64le")
    rec = run_fusion(_cheap(r=4, c=4, gt_path=str(tmp_path / "raw")), write=False)
    assert rec.input_hashes["gt"]
    assert rec.artifacts["lr_hsi"].values.max() <= 1


def test_oracle_split_and_dictionary(gt128):
    cfg = ExperimentConfig(K=5, hidden=(16,), train=TINY, oracle_train=TrainConfig(epochs=1, batch_size=512))
    rec = run_oracle(cfg, gt=gt128, write=False)
    train_box, test_box = rec.artifacts["train_box"], rec.artifacts["test_box"]
    assert not train_box.overlaps(test_box)
    assert rec.artifacts["endmembers"].shape == (5, 16)
    assert rec.artifacts["hr_hsi_est"].shape == (32, 128, 16)
    with pytest.raises(StageError):
        run_oracle(cfg)


def test_oracle_split_failure(gt64):
    with pytest.raises(StageError) as exc:
        run_oracle(_cheap(r=4, c=4), gt=gt64, write=False)
    assert exc.value.stage == "split"


def test_ablation_registry_covers_tables():
    expected = {"nn", "nn_sum1", "no_hidden", "hidden_64", "hidden_128", "hidden_256", "hidden_512",
                "hidden_2048", "two_hidden", "mse", "leaky_relu", "gelu", "tanh", "k_plus_4",
                "k_minus_4", "csp_off", "csp_s2", "csp_s8", "csp_s16"}
    assert set(ABLATIONS) == expected


@pytest.mark.parametrize("variant", sorted(ABLATIONS))
def test_ablation_isolation(variant):
    base = ExperimentConfig(K=9, c=1)
    diff = config_diff(base, ablation_config(base, variant))
    assert len(diff) == 1, diff


def test_ablation_examples(gt64):
    base = _cheap(r=8, c=1)
    no_hidden = run_ablation(base, "no_hidden", gt=gt64, write=False)
    d_in = 1 + 16
    assert no_hidden.artifacts["model"].hidden == ()
    assert no_hidden.report.params == (d_in + 1) * 5
    soft = run_ablation(base, "nn_sum1", gt=gt64, write=False)
    assert soft.artifacts["model"].output_mode == "softmax"
    off = run_ablation(base, "csp_off", gt=gt64, write=False)
    assert off.artifacts["model"].d_in == 1
    with pytest.raises(ValueError):
        run_ablation(base, "dropout", gt=gt64)
    with pytest.raises(ValueError):
        ablation_config(ExperimentConfig(K=3), "k_minus_4")


def test_aggregate_examples():
    single = aggregate_reports([_report(0.02)])
    assert single.means == _report(0.02).metrics()
    two = aggregate_reports([_report(0.02), _report(0.04)])
    assert math.isclose(two.means["rmse"], 0.03, rel_tol=1e-12)
    inf = aggregate_reports([_report(0.0, math.inf), _report(0.1, 20.0), _report(0.2, 10.0)])
    assert inf.inf_psnr_excluded == 1 and inf.means["psnr_db"] == 15.0
    assert "excluded" in inf.to_text()
    with pytest.raises(ValueError):
        aggregate_reports([])


def test_grid_of_80_and_spreadsheet_mean(gt64, tmp_path):
    cfg = _cheap(K=3, hidden=(8,), train=TrainConfig(epochs=1, batch_size=256),
                 out_dir=str(tmp_path / "grid"))
    records = run_grid(cfg, gt=gt64)
    assert len(records) == 80 and all(isinstance(r, RunRecord) for r in records)
    summary = aggregate_reports(records)
    # recompute from the written per-run CSV files, spreadsheet style
    columns = {m: [] for m in METRIC_NAMES}
    for path in sorted((tmp_path / "grid").glob("*/report.csv")):
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                for m in METRIC_NAMES:
                    columns[m].append(float(row[m]))
    assert len(columns["rmse"]) == 80
    for m in METRIC_NAMES:
        vals = [v for v in columns[m] if math.isfinite(v)]
        assert math.isclose(summary.means[m], sum(vals) / len(vals), rel_tol=1e-12)
    text = summary.to_text()
    assert text.splitlines()[0].split() == ["runs", "80"]
