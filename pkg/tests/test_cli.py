"""Run-config precedence/validation and the command-line pipeline end to end.

The pipeline fixture drives synth -> fracture -> train -> complete -> eval ->
report -> sweep on a deliberately small dataset through cli.main(), checking
artifacts and exit codes like an operator would see them.
"""

import json
import os

import numpy as np
import pytest

from tubecomplete import config as cfgmod
from tubecomplete.cli import build_parser, main
from tubecomplete.errors import ConfigError
from tubecomplete.geometry import AORTA, CORONARY, PointCloud, load_cloud, save_cloud
from tubecomplete.metrics import read_csv
from tubecomplete.train import load_model_checkpoint

SMOKE_CONFIG = {
    "dataset": {
        "points": 256,
        "cases_per_patient": 2,
        "tree": {"dims": [64, 64, 64], "depth": 2, "branch_count": 2},
    },
    "model": {
        "n_complete": 256,
        "transsa": {"blocks": 2, "k_group": 8, "centroids": [48, 16],
                    "dims": [16, 16]},
        "refine": {"up_factor": 2, "attention_rounds": 1, "hidden_dim": 16,
                   "neighbor_feats": 2},
    },
    "loss": {"epsilon": 0.05},
    "train": {"epochs": 2, "lr": 3e-4, "seed": 0},
}


# ---------------------------------------------------------------------------
# config document handling
# ---------------------------------------------------------------------------

def test_defaults_load_and_are_isolated():
    doc = cfgmod.load_run_config()
    assert doc == cfgmod.DEFAULTS
    doc["train"]["epochs"] = 999
    assert cfgmod.load_run_config()["train"]["epochs"] == 30


def test_precedence_flag_over_file_over_default(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"epochs": 7, "lr": 0.01}}),
                    encoding="utf-8")
    doc = cfgmod.load_run_config(path, {"train": {"epochs": 9}})
    assert doc["train"]["epochs"] == 9      # override wins
    assert doc["train"]["lr"] == 0.01       # file survives where not overridden
    assert doc["train"]["seed"] == 0        # default fills the rest


@pytest.mark.parametrize("bad", [
    {"bogus": {}},
    {"model": {"bogus": 1}},
    {"dataset": {"tree": {"bogus": 1}}},
    {"train": {"epochs": "ten"}},
    {"model": {"stages": 3}},
])
def test_unknown_or_invalid_keys_rejected(tmp_path, bad):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(bad), encoding="utf-8")
    with pytest.raises(ConfigError):
        cfgmod.load_run_config(path)


def test_validation_error_names_the_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"epochs": "ten"}}), encoding="utf-8")
    with pytest.raises(ConfigError, match="train/epochs"):
        cfgmod.load_run_config(path)


def test_non_json_config_rejected(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        cfgmod.load_run_config(path)


def test_typed_builders():
    doc = cfgmod.load_run_config(None, {
        "model": {"cps": {"sparse_boost": 4.0}},
        "loss": {"gamma": 0.25},
    })
    mcfg = cfgmod.model_config(doc)
    assert mcfg.n_complete == 4096 and mcfg.n0 == 1024
    assert mcfg.cps.sparse_boost == 4.0
    lcfg = cfgmod.loss_config(doc)
    assert lcfg.gamma == 0.25
    assert lcfg.cps.sparse_boost == 4.0    # loss sees the model's cps section
    assert cfgmod.eval_config(doc).tau == 0.01
    assert cfgmod.fracture_spec(doc, seed=5).seed == 5
    tspec = cfgmod.tree_spec(doc, seed=3)
    assert tspec.dims == (64, 64, 64)
    assert tspec.seed == 3


# ---------------------------------------------------------------------------
# parser surface
# ---------------------------------------------------------------------------

def test_parser_requires_a_command():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([])
    assert exc.value.code == 2


def test_subcommand_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["synth", "--help"])
    assert exc.value.code == 0
    assert "--patients" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_pipeline")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMOKE_CONFIG), encoding="utf-8")
    data = root / "data"
    assert main(["synth", "--config", str(cfg), "--out", str(data),
                 "--patients", "3", "--seed", "21"]) == 0
    assert main(["fracture", "--config", str(cfg), "--in", str(data),
                 "--out", str(data), "--seed", "21"]) == 0
    return {"root": root, "cfg": cfg, "data": data}


@pytest.fixture(scope="module")
def trained(pipeline):
    model = pipeline["root"] / "model.tsrc"
    rc = main(["train", "--config", str(pipeline["cfg"]),
               "--data", str(pipeline["data"]), "--out", str(model),
               "--quiet"])
    assert rc == 0
    return model


def test_synth_writes_patients_and_manifest(pipeline):
    data = pipeline["data"]
    manifest = json.loads((data / "dataset.json").read_text(encoding="utf-8"))
    assert manifest["splits"]["train"] == ["p000", "p001"]
    assert manifest["splits"]["test"] == ["p002"]
    # generation provenance lives in the manifest's spec echo
    assert manifest["spec"]["tree"]["dims"] == [64, 64, 64]
    assert manifest["spec"]["seed"] == 21
    for pid in ("p000", "p001", "p002"):
        gt = load_cloud(data / pid / "gt.tpc")
        assert len(gt) == 256
        assert (gt.labels == CORONARY).sum() >= 20
        meta = json.loads((data / pid / "meta.json").read_text(encoding="utf-8"))
        assert meta["patient_id"] == pid


def test_fracture_writes_cases_with_provenance(pipeline):
    data = pipeline["data"]
    for pid in ("p000", "p001", "p002"):
        meta = json.loads((data / pid / "meta.json").read_text(encoding="utf-8"))
        assert len(meta["cases"]) == 2
        gt = load_cloud(data / pid / "gt.tpc")
        n_cor = int((gt.labels == CORONARY).sum())
        for entry in meta["cases"]:
            case = load_cloud(data / pid / f"case_{entry['case_index']}.tpc")
            assert len(case) == entry["n_input"] < 256
            assert 0.10 <= entry["removed_ratio"] <= 0.30
            removed = 256 - entry["n_input"]
            assert abs(removed - entry["removed_ratio"] * n_cor) <= 1.0


def test_train_writes_checkpoint_and_loss_log(trained, pipeline):
    mcfg, params, doc = load_model_checkpoint(trained)
    assert mcfg.n_complete == 256
    assert all(p.requires_grad for p in params.values())
    assert doc["train"] == {"lr": 3e-4, "seed": 0}
    assert doc["progress"] == {"epoch": 2}
    log = (pipeline["root"] / "model.tsrc.log.csv").read_text(encoding="utf-8")
    lines = log.strip().splitlines()
    assert lines[0] == "epoch,l_g,l_l,total,branch_fraction"
    assert len(lines) == 3  # header + one row per epoch


def test_complete_emits_full_cloud(trained, pipeline, tmp_path):
    data = pipeline["data"]
    out = tmp_path / "completed.tpc"
    rc = main(["complete", "--model", str(trained),
               "--in", str(data / "p002" / "case_0.tpc"), "--out", str(out)])
    assert rc == 0
    cloud = load_cloud(out)
    assert len(cloud) == 256
    assert set(np.unique(cloud.labels)) <= {AORTA, CORONARY}


def test_eval_on_model_predictions(trained, pipeline, tmp_path):
    data = pipeline["data"]
    preds = tmp_path / "preds"
    for pid in ("p000", "p001", "p002"):
        os.makedirs(preds / pid)
        for k in (0, 1):
            rc = main(["complete", "--model", str(trained),
                       "--in", str(data / pid / f"case_{k}.tpc"),
                       "--out", str(preds / pid / f"completed_{k}.tpc")])
            assert rc == 0
    out_csv = tmp_path / "eval.csv"
    rc = main(["eval", "--pred", str(preds), "--gt", str(data),
               "--out", str(out_csv), "--svg", str(tmp_path / "eval.svg")])
    assert rc == 0
    rows = read_csv(out_csv)
    assert len(rows) == 6
    assert {r.case_id for r in rows} == {
        f"p{p:03d}/case_{k}" for p in range(3) for k in (0, 1)}
    assert (tmp_path / "eval.svg").exists()
    assert (tmp_path / "eval.json").exists()


def test_eval_gt_fallback_scores_perfectly(pipeline, tmp_path):
    # pointing --pred at the dataset root falls back to each patient's own
    # gt.tpc, which is a perfect prediction
    data = pipeline["data"]
    out_csv = tmp_path / "eval.csv"
    rc = main(["eval", "--pred", str(data), "--gt", str(data),
               "--out", str(out_csv)])
    assert rc == 0
    rows = read_csv(out_csv)
    assert len(rows) == 6
    assert all(r.cd_l1 == 0.0 and r.f1 == 100.0 for r in rows)


def test_eval_reports_unmatched_cases(pipeline, tmp_path, capsys):
    empty = tmp_path / "nothing"
    os.makedirs(empty)
    rc = main(["eval", "--pred", str(empty), "--gt", str(pipeline["data"]),
               "--out", str(tmp_path / "eval.csv")])
    assert rc == 4
    assert "unmatched case ids" in capsys.readouterr().err


def test_report_renders_chart_from_csv(pipeline, tmp_path):
    data = pipeline["data"]
    csv_path = tmp_path / "eval.csv"
    assert main(["eval", "--pred", str(data), "--gt", str(data),
                 "--out", str(csv_path)]) == 0
    svg = tmp_path / "chart.svg"
    assert main(["report", "--in", str(csv_path), "--svg", str(svg)]) == 0
    assert svg.read_text(encoding="utf-8").startswith("<svg ")


def test_sweep_identity_baseline(pipeline, tmp_path):
    out_csv = tmp_path / "sweep.csv"
    rc = main(["sweep", "--config", str(pipeline["cfg"]),
               "--data", str(pipeline["data"]), "--ratios", "0.15,0.3",
               "--seed", "5", "--out", str(out_csv)])
    assert rc == 0
    rows = read_csv(out_csv)
    assert [r.severity for r in rows] == [0.15, 0.3]  # one test patient each


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_config_problem_exits_2(tmp_path, capsys):
    bad = tmp_path / "run.json"
    bad.write_text("{not json", encoding="utf-8")
    rc = main(["synth", "--config", str(bad), "--out", str(tmp_path / "d")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_thread_cap_validation_exits_2(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "d"), "--threads", "0"])
    assert rc == 2
    capsys.readouterr()


def test_missing_checkpoint_exits_3(tmp_path, capsys):
    rc = main(["complete", "--model", str(tmp_path / "no.tsrc"),
               "--in", str(tmp_path / "no.tpc"), "--out", str(tmp_path / "o.tpc")])
    assert rc == 3
    capsys.readouterr()


def test_unsplittable_coronary_exits_4(tmp_path, capsys):
    # a coronary ring never gains components when an arc is removed, so the
    # fracture retries exhaust
    rng = np.random.default_rng(0)
    theta = np.linspace(0.0, 2 * np.pi, 10, endpoint=False)
    ring = np.stack([0.1 * np.cos(theta), 0.1 * np.sin(theta),
                     np.zeros(10)], axis=1)
    blob = rng.normal(size=(8, 3)) * 0.02 + [2.0, 0, 0]
    gt = PointCloud(np.vstack([blob, ring]),
                    np.array([AORTA] * 8 + [CORONARY] * 10))
    gt_path = tmp_path / "gt.tpc"
    save_cloud(gt, gt_path)
    rc = main(["fracture", "--in", str(gt_path), "--cases", "1",
               "--out", str(tmp_path / "ringpatient")])
    assert rc == 4
    assert "error:" in capsys.readouterr().err
