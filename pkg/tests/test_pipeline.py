import csv
import json
from dataclasses import replace

import pytest

from demoscore.cli import main
from demoscore.curator import CurationConfig
from demoscore.envsim import ConfigError
from demoscore.pipeline import (
    COMPOSITION_HEADER,
    SUMMARY_HEADER,
    SUITES,
    ExperimentConfig,
    Workspace,
    emit_report,
    episode_accounting,
    load_reports,
    run_ablation_suite,
    run_experiment,
    suite_variants,
    variant_config,
)
from demoscore.policy import TrainRun

SMALL = {
    "mixture": [["WideA", 6], ["NarrowB", 6]],
    "train": {"steps": 200, "batch": 32, "checkpoints": 4, "hidden": [16, 16]},
    "curation": {"rollouts_per_ckpt": 8, "epochs": 5, "batch": 64, "fallback": True},
    "eval_n": 16,
    "seeds": [0, 1],
}


def small_cfg(tmp_path, **over):
    d = json.loads(json.dumps(SMALL))
    d["output_dir"] = str(tmp_path / "out")
    d.update(over)
    return ExperimentConfig.from_dict(d)


def write_cfg(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


# --- configuration ---------------------------------------------------------

def test_config_roundtrip():
    cfg = ExperimentConfig()
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("bad", [
    {"method": "magic"},
    {"seeds": [1, 1]},
    {"bogus": 1},
    {"env": {"gap_half_width": 0.001}},
    {"curation": {"mode": "sideways"}},
    {"train": {"checkpoints": 1}},
])
def test_bad_configs_raise_config_error(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_variants_and_suites():
    assert suite_variants("table2") == SUITES["table2"]
    assert suite_variants("chunk,no_cv") == ["chunk", "no_cv"]
    with pytest.raises(ConfigError):
        suite_variants("chunk,bogus")
    with pytest.raises(ConfigError):
        variant_config(ExperimentConfig(), "bogus")
    v = variant_config(ExperimentConfig(), "rollouts_10")
    assert v.curation.rollouts_per_ckpt == 10 and v.curation.val_rollouts == 50


# --- reports ---------------------------------------------------------------

def test_empty_report_list_gives_header_only_csvs(tmp_path):
    emit_report([], tmp_path)
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows == [SUMMARY_HEADER]
    with open(tmp_path / "composition.csv") as fh:
        assert list(csv.reader(fh)) == [COMPOSITION_HEADER]


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("small")
    cfg = small_cfg(tmp)
    ws = Workspace(cfg.output_dir)
    rep = run_experiment(cfg, ws=ws)
    return cfg, ws, rep


def test_one_method_one_row(small_run, tmp_path):
    cfg, _, rep = small_run
    base_only = replace(rep, methods={"demo_score": rep.methods["demo_score"]})
    paths = emit_report([base_only], tmp_path, figures=True)
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 2 and rows[1][2] == "demo_score"
    for cell in rows[1][6:]:
        digits = cell.lstrip("-").replace(".", "").lstrip("0").split("e")[0]
        assert len(digits) <= 6
    assert any(p.suffix == ".png" for p in paths)
    assert (tmp_path / "success.png").stat().st_size > 0


def test_report_reload_is_stable(small_run, tmp_path):
    _, _, rep = small_run
    emit_report([rep], tmp_path / "a", figures=False)
    emit_report(load_reports(tmp_path / "a"), tmp_path / "b", figures=False)
    for name in ("summary.csv", "composition.csv", "plotdata.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_episode_accounting(small_run):
    cfg, _, rep = small_run
    acct = episode_accounting(rep)
    c, m = cfg.train.checkpoints, cfg.curation.rollouts_per_ckpt
    per_seed_eval = cfg.eval_n * c
    assert acct["demo_score"]["curation_rollouts"] == len(cfg.seeds) * c * m
    assert acct["demo_score"]["total"] == len(cfg.seeds) * (c * m + per_seed_eval)
    assert acct["base"]["curation_rollouts"] == 0


def test_every_record_traceable(small_run):
    _, _, rep = small_run
    for block in rep.methods.values():
        for rec in block["per_seed"]:
            assert "seed" in rec and "eval_seed" in rec and "episodes" in rec
            assert rec["final"]["lo"] <= rec["final"]["p_hat"] <= rec["final"]["hi"]


def test_selection_is_minimum(small_run):
    _, _, rep = small_run
    for rec in rep.methods["demo_score"]["per_seed"]:
        sel = rec["selection"]
        chosen = [c for c in sel["candidates"] if c["ckpt"] == sel["chosen_ckpt"]][0]
        assert chosen["val_loss"] == min(c["min_val_history"] for c in sel["candidates"])


def test_resume_from_stage_artifacts(small_run):
    cfg, ws, rep = small_run
    fresh = Workspace(cfg.output_dir)
    run = fresh.initial(cfg, cfg.seeds[0])
    assert run.timings == {}  # loaded, not retrained
    assert sorted(run.pools) == [1, 2, 3, 4]
    again = run_experiment(cfg, ["demo_score"], ws=fresh)
    a = [r["curation"] for r in rep.methods["demo_score"]["per_seed"]]
    b = [r["curation"] for r in again.methods["demo_score"]["per_seed"]]
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_eval_seed_does_not_touch_curation(small_run):
    cfg, ws, rep = small_run
    other = run_experiment(replace(cfg, eval_seed=99), ["demo_score"], ws=ws)
    a = [r["curation"] for r in rep.methods["demo_score"]["per_seed"]]
    b = [r["curation"] for r in other.methods["demo_score"]["per_seed"]]
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_baselines_run(small_run):
    cfg, ws, _ = small_run
    rep = run_experiment(cfg, ["auto_il", "rcp", "loss_weighting"], ws=ws)
    assert set(rep.methods) == {"auto_il", "rcp", "loss_weighting"}
    for rec in rep.methods["loss_weighting"]["per_seed"]:
        assert min(rec["weights"].values()) == 0.0


def test_ood_evaluation(tmp_path):
    cfg = small_cfg(tmp_path, seeds=[0], ood_expansions=[0.5, 1.0])
    rep = run_experiment(cfg, ["base"])
    rec = rep.methods["base"]["per_seed"][0]
    assert set(rec["ood"]) == {"0.5", "1.0"}


def test_budget_variant_consumption(small_run):
    cfg, ws, _ = small_run
    cfg = replace(cfg, curation=CurationConfig(**{**cfg.to_dict()["curation"], "hidden": (8, 8)}))
    reps = run_ablation_suite(cfg, "rollouts_10,no_cv", ws=ws)
    ten = reps[0].methods["demo_score"]["per_seed"]
    c = cfg.train.checkpoints
    assert all(r["episodes"]["curation_rollouts"] == 10 * (c - 1) + 50 for r in ten)
    no_cv = reps[1].methods["demo_score"]["per_seed"]
    assert all(r["selection"]["val_ckpt"] is None for r in no_cv)


def test_ablation_reuses_identical_variants(small_run):
    cfg, ws, _ = small_run
    reps = run_ablation_suite(cfg, "original,clf_8_8", ws=ws)
    assert reps[1].timings == {"reused_from": "original"}
    assert reps[1].methods["demo_score"] is reps[0].methods["demo_score"]


# --- CLI -------------------------------------------------------------------

def test_cli_bad_config_exit_2(tmp_path):
    assert main(["run", "--config", write_cfg(tmp_path, {"method": "nope"})]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["ablate", "--config", write_cfg(tmp_path, SMALL), "--suite", "bogus"]) == 2


def test_cli_degenerate_exit_3(tmp_path):
    d = json.loads(json.dumps(SMALL))
    d["seeds"] = [0]
    d["curation"].update({"fallback": False, "min_kept_fraction": 1.0})
    d["output_dir"] = str(tmp_path / "o")
    assert main(["run", "--config", write_cfg(tmp_path, d), "--no-figures"]) == 3


def test_cli_run_and_report(tmp_path, capsys):
    d = json.loads(json.dumps(SMALL))
    d["seeds"] = [0]
    out = tmp_path / "o"
    assert main(["run", "--config", write_cfg(tmp_path, d), "--method", "auto_il", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "episodes[auto_il]" in printed
    assert (out / "summary.csv").exists() and (out / "success.png").exists()
    assert main(["report", "--in", str(out), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "summary.csv").read_bytes() == (out / "summary.csv").read_bytes()


def test_cli_calibrate_demos_only(tmp_path, capsys):
    assert main(["calibrate", "--trials", "100", "--demos-only"]) == 0
    assert "calibration PASS" in capsys.readouterr().out


def test_train_run_from_config_is_validated():
    with pytest.raises(ConfigError):
        ExperimentConfig(train=TrainRun(checkpoints=3))
