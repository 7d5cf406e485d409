"""End-to-end orchestration: initial run, curation, retraining, baselines, ablations."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import baselines
from .curator import CurationConfig, CurationConfigError, curate
from .datamodel import DemoDataset, RolloutSet, build_mixture, load_jsonl, save_jsonl
from .envsim import ConfigError, EnvConfig, StrategyTag, calibrate
from .numcore import derive_seed
from .policy import (
    MdnPolicy,
    SuccessStats,
    TrainResult,
    TrainRun,
    collect_rollouts,
    train_bc,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("demo_score", "base", "auto_il", "rcp", "loss_weighting")

# variant name -> CurationConfig overrides
VARIANTS: dict[str, dict] = {
    "original": {},
    "chunk": {"mode": "chunk"},
    "trajectory": {"kind": "trajectory"},
    "plateau": {"ckpt_strategy": "plateau"},
    "no_reg": {"regularization": False},
    "no_cv": {"cross_validation": False},
    "rollouts_10": {"rollouts_per_ckpt": 10, "val_rollouts": 50},
    "rollouts_25": {"rollouts_per_ckpt": 25, "val_rollouts": 50},
    "rollouts_50": {"rollouts_per_ckpt": 50, "val_rollouts": 50},
    "rollouts_100": {"rollouts_per_ckpt": 100, "val_rollouts": 50},
    "clf_8_8": {"hidden": (8, 8)},
    "clf_8_8_8": {"hidden": (8, 8, 8)},
    "clf_16_16": {"hidden": (16, 16)},
    "clf_16_16_16": {"hidden": (16, 16, 16)},
    "clf_32_32": {"hidden": (32, 32)},
    "clf_32_32_32": {"hidden": (32, 32, 32)},
}
SUITES = {
    "table2": ["original", "chunk", "trajectory", "plateau", "no_reg", "no_cv"],
    "budget": ["rollouts_100", "rollouts_50", "rollouts_25", "rollouts_10"],
    "classifier_size": ["clf_8_8", "clf_8_8_8", "clf_16_16", "clf_16_16_16", "clf_32_32", "clf_32_32_32"],
}
SUITES["all"] = list(dict.fromkeys(SUITES["table2"] + SUITES["budget"] + SUITES["classifier_size"]))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def mixture_label(mixture) -> str:
    return "-".join(f"{StrategyTag(t).value}{int(n)}" for t, n in mixture)


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    mixture: list = field(default_factory=lambda: [["WideA", 50], ["NarrowB", 50]])
    train: TrainRun = field(default_factory=TrainRun)
    curation: CurationConfig = field(default_factory=CurationConfig)
    method: str = "demo_score"
    eval_n: int = 256
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    eval_seed: int = 0
    ood_expansions: list = field(default_factory=list)
    finetune: bool = False
    output_dir: str = "demoscore_out"

    def __post_init__(self):
        self.mixture = [[StrategyTag(t).value, int(n)] for t, n in self.mixture]
        self.seeds = [int(s) for s in self.seeds]
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("replicate seeds must be non-empty and distinct")
        if self.eval_n < 1:
            raise ConfigError("eval_n must be >= 1")
        if any(n < 0 for _, n in self.mixture):
            raise ConfigError("mixture counts must be >= 0")
        if self.curation.checkpoints != self.train.checkpoints:
            raise ConfigError("curation.checkpoints must equal train.checkpoints")
        self.env.validate()

    @property
    def label(self) -> str:
        return mixture_label(self.mixture)

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "mixture": [list(m) for m in self.mixture],
            "train": {**asdict(self.train), "hidden": list(self.train.hidden)},
            "curation": {**asdict(self.curation), "hidden": list(self.curation.hidden)},
            "method": self.method,
            "eval_n": self.eval_n,
            "seeds": list(self.seeds),
            "eval_seed": self.eval_seed,
            "ood_expansions": list(self.ood_expansions),
            "finetune": self.finetune,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        try:
            if "env" in d:
                d["env"] = EnvConfig.from_dict(d["env"])
            if "train" in d:
                t = dict(d["train"])
                if "hidden" in t:
                    t["hidden"] = tuple(t["hidden"])
                d["train"] = TrainRun(**t)
            if "curation" in d:
                d["curation"] = CurationConfig(**d["curation"])
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(d)


def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    try:
        cur = replace(cfg.curation, **VARIANTS[variant])
    except CurationConfigError as e:
        raise ConfigError(str(e)) from None
    return replace(cfg, curation=cur, method="demo_score")


def suite_variants(suite: str) -> list[str]:
    if suite in SUITES:
        return list(SUITES[suite])
    names = [s.strip() for s in suite.split(",") if s.strip()]
    bad = [n for n in names if n not in VARIANTS]
    if bad or not names:
        raise ConfigError(f"unknown ablation suite/variants {bad or suite!r}")
    return names


# ---------------------------------------------------------------------------
# shared initial run (stage cache)
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except Exception as e:
        if not hasattr(e, "stage"):
            e.stage = name
        raise
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


@dataclass
class InitialRun:
    """Demos, the all-demos training run, and per-checkpoint rollout pools for one seed."""

    seed: int
    demos: DemoDataset
    train: TrainResult
    pools: dict[int, RolloutSet] = field(default_factory=dict)  # ckpt (1-based) -> pool
    holdout: RolloutSet | None = None
    stage_dir: Path | None = None
    timings: dict = field(default_factory=dict)


def _stage_key(cfg: ExperimentConfig, seed: int) -> str:
    blob = json.dumps(
        {"env": cfg.env.to_dict(), "mixture": cfg.mixture, "train": cfg.to_dict()["train"], "seed": seed},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


class Workspace:
    """Caches initial runs in memory and (optionally) on disk, keyed by config and seed.

    On-disk stage artifacts (demos, checkpoints, rollout pools) let a later
    process resume after the rollout stage without retraining.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._runs: dict[str, InitialRun] = {}

    def initial(self, cfg: ExperimentConfig, seed: int) -> InitialRun:
        key = _stage_key(cfg, seed)
        if key in self._runs:
            return self._runs[key]
        stage_dir = self.root / "stages" / f"{cfg.label}-s{seed}-{key}" if self.root else None
        run = load_stage(stage_dir) if stage_dir and (stage_dir / "manifest.json").exists() else None
        if run is None:
            timings: dict = {}
            with _stage("build_mixture", timings):
                demos = build_mixture(cfg.mixture, cfg.env, derive_seed(seed, "demos"))
            if not len(demos):
                raise ConfigError("mixture is empty: cannot train a policy on zero demonstrations")
            with _stage("train_initial", timings):
                tr = train_bc(demos, cfg.train, derive_seed(seed, "bc-initial"))
            run = InitialRun(seed, demos, tr, stage_dir=stage_dir, timings=timings)
            if stage_dir:
                save_stage(run, stage_dir)
        run.stage_dir = stage_dir
        self._runs[key] = run
        return run

    def pool(self, cfg: ExperimentConfig, run: InitialRun, ckpt: int, m: int) -> RolloutSet:
        """The first ``m`` rollouts of checkpoint ``ckpt`` (1-based); grows the pool on demand."""
        have = run.pools.get(ckpt)
        if have is None or len(have) < m:
            with _stage("collect_rollouts", run.timings):
                have = collect_rollouts(
                    run.train.checkpoints[ckpt - 1], cfg.env, m, derive_seed(run.seed, "rollouts", ckpt), ckpt=ckpt
                )
            run.pools[ckpt] = have
            if run.stage_dir:
                save_jsonl(have, run.stage_dir / f"rollouts_ckpt{ckpt}.jsonl")
                _write_manifest(run)
        return have.subset(m)

    def holdout_pool(self, cfg: ExperimentConfig, run: InitialRun, ckpt: int, m: int) -> RolloutSet:
        if run.holdout is None or len(run.holdout) < m or run.holdout.ckpt != ckpt:
            with _stage("collect_rollouts", run.timings):
                run.holdout = collect_rollouts(
                    run.train.checkpoints[ckpt - 1], cfg.env, m, derive_seed(run.seed, "holdout-pool"), ckpt=ckpt
                )
        return run.holdout.subset(m)


def _write_manifest(run: InitialRun) -> None:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": run.seed,
        "ckpt_steps": run.train.steps,
        "loss_curve": run.train.loss_curve,
        "pools": {str(k): len(v) for k, v in sorted(run.pools.items())},
    }
    (run.stage_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


def save_stage(run: InitialRun, stage_dir: Path) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    save_jsonl(run.demos, stage_dir / "demos.jsonl")
    for i, ck in enumerate(run.train.checkpoints, 1):
        (stage_dir / f"policy_ckpt{i}.bin").write_bytes(ck.to_bytes())
    for k, pool in run.pools.items():
        save_jsonl(pool, stage_dir / f"rollouts_ckpt{k}.jsonl")
    run.stage_dir = stage_dir
    _write_manifest(run)


def load_stage(stage_dir: Path) -> InitialRun | None:
    try:
        manifest = json.loads((stage_dir / "manifest.json").read_text())
        demos = load_jsonl(stage_dir / "demos.jsonl")
        ckpts = [MdnPolicy.from_bytes((stage_dir / f"policy_ckpt{i}.bin").read_bytes())
                 for i in range(1, len(manifest["ckpt_steps"]) + 1)]
        pools = {int(k): load_jsonl(stage_dir / f"rollouts_ckpt{k}.jsonl") for k in manifest["pools"]}
    except (OSError, ValueError, KeyError) as e:
        log.warning("ignoring unreadable stage directory %s: %s", stage_dir, e)
        return None
    tr = TrainResult(ckpts, list(manifest["ckpt_steps"]), [tuple(c) for c in manifest["loss_curve"]])
    return InitialRun(int(manifest["seed"]), demos, tr, pools, stage_dir=stage_dir)


# ---------------------------------------------------------------------------
# methods
# ---------------------------------------------------------------------------

def _eval_checkpoints(ckpts, cfg: ExperimentConfig, seed: int, condition=None, env=None) -> list[SuccessStats]:
    env = env or cfg.env
    out = []
    for ck in ckpts:
        ro = collect_rollouts(ck, env, cfg.eval_n, derive_seed(cfg.eval_seed, "eval", seed), condition=condition)
        out.append(SuccessStats.from_outcomes([t.outcome for t in ro]))
    return out


def _curation_sets(ws: Workspace, cfg: ExperimentConfig, run: InitialRun) -> list[RolloutSet]:
    cc = cfg.curation
    m = cc.rollouts_per_ckpt
    val_m = cc.val_rollouts or m
    c = cfg.train.checkpoints
    return [ws.pool(cfg, run, i, m) for i in range(1, c)] + [ws.pool(cfg, run, c, val_m)]


def _best_ckpt(sets: list[RolloutSet]) -> int:
    rates = [s.success_rate for s in sets]
    best = max(rates)
    return max(s.ckpt for s, r in zip(sets, rates) if r == best)


def run_method(ws: Workspace, cfg: ExperimentConfig, method: str, seed: int) -> dict:
    """One replicate of one method. Returns a JSON-ready record."""
    run = ws.initial(cfg, seed)
    timings: dict = {}
    rec: dict = {"seed": seed, "method": method, "eval_seed": cfg.eval_seed}
    episodes = {"curation_rollouts": 0, "eval": 0}
    init = run.train.final if cfg.finetune else None
    condition = None

    if method == "base":
        with _stage("evaluate", timings):
            stats = _eval_checkpoints(run.train.checkpoints, cfg, seed)
        final_ckpts = run.train.checkpoints
        episodes["eval"] += cfg.eval_n * len(stats)
    else:
        sets = _curation_sets(ws, cfg, run)
        episodes["curation_rollouts"] = sum(len(s) for s in sets)
        rec["rollout_success"] = [s.success_rate for s in sets]
        fseed = derive_seed(seed, "bc-final", method)
        if method == "demo_score":
            holdout = None
            if not cfg.curation.cross_validation:
                best = _best_ckpt(sets)
                holdout = ws.holdout_pool(cfg, run, best, sum(len(s) for s in sets))
                episodes["curation_rollouts"] = len(holdout)
            with _stage("curate", timings):
                result, train_trajs, sel = curate(
                    run.demos, sets, cfg.curation, derive_seed(seed, "curation"), holdout_pool=holdout
                )
            rec["curation"] = result.to_dict()
            rec["selection"] = {
                "candidates": [
                    {"ckpt": c.ckpt, "val_loss": c.val_loss, "best_epoch": c.best_epoch,
                     "min_val_history": min(c.val_history)}
                    for c in sel.candidates
                ],
                "val_ckpt": sel.val_ckpt,
                "chosen_ckpt": sel.chosen.ckpt,
            }
            with _stage("train_final", timings):
                fin = train_bc(train_trajs, cfg.train, fseed, init=init)
        elif method == "auto_il":
            data = baselines.auto_il_dataset(run.demos, sets)
            rec["dataset_size"] = len(data)
            with _stage("train_final", timings):
                fin = train_bc(data, cfg.train, fseed, init=init)
        elif method == "rcp":
            data = baselines.rcp_dataset_and_policy(run.demos, sets)
            if data.input_width != baselines.RCP_INPUT_WIDTH:
                raise ConfigError(f"RCP input width {data.input_width} != {baselines.RCP_INPUT_WIDTH}")
            rec["dataset_size"] = len(data.trajectories)
            condition = data.condition
            with _stage("train_final", timings):
                fin = train_bc(data.trajectories, cfg.train, fseed, extra_input=data.returns)
        elif method == "loss_weighting":
            best = _best_ckpt(sets)
            wd = baselines.loss_weighting(run.demos, run.train.checkpoints[best - 1])
            rec["weights_from_ckpt"] = best
            rec["weights"] = {t.id: float(w) for t, w in zip(run.demos, wd.weights)}
            with _stage("train_final", timings):
                fin = train_bc(run.demos, cfg.train, fseed, weights=wd.weights, init=init)
        else:
            raise ConfigError(f"unknown method {method!r}")
        final_ckpts = fin.checkpoints
        rec["final_loss_curve"] = fin.loss_curve
        with _stage("evaluate", timings):
            stats = _eval_checkpoints(final_ckpts, cfg, seed, condition)
        episodes["eval"] += cfg.eval_n * len(stats)

    rec["ckpt_steps"] = list(cfg.train.schedule)
    rec["ckpt_success"] = [s.to_dict() for s in stats]
    rec["final"] = stats[-1].to_dict()
    rec["max"] = max(stats, key=lambda s: s.p_hat).to_dict()
    if cfg.ood_expansions:
        rec["ood"] = {}
        for f in cfg.ood_expansions:
            s = _eval_checkpoints([final_ckpts[-1]], cfg, seed, condition, cfg.env.with_start_expansion(f))[0]
            rec["ood"][str(f)] = s.to_dict()
            episodes["eval"] += cfg.eval_n
    episodes["total"] = episodes["curation_rollouts"] + episodes["eval"]
    rec["episodes"] = episodes
    rec["timings"] = timings
    return rec


def _pool_stats(records: list[dict], key: str) -> dict:
    n = sum(r[key]["n"] for r in records)
    k = sum(r[key]["successes"] for r in records)
    if all(r[key]["mode"] == "wilson" for r in records):
        return asdict(SuccessStats.from_outcomes([1.0] * int(k) + [0.0] * int(n - k))) if n else {}
    # fractional outcomes: pool the per-replicate means
    return asdict(SuccessStats.from_outcomes([r[key]["p_hat"] for r in records]))


@dataclass
class Report:
    variant: str
    mixture: str
    config: dict
    methods: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def pooled(self, method: str, convention: str = "final") -> dict:
        return self.methods[method][f"pooled_{convention}"]

    def curation(self, seed: int) -> dict:
        recs = self.methods["demo_score"]["per_seed"]
        return next(r["curation"] for r in recs if r["seed"] == seed)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "variant": self.variant,
            "mixture": self.mixture,
            "config": self.config,
            "methods": self.methods,
            "initial": self.initial,
            "timings": self.timings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(d["variant"], d["mixture"], d["config"], d["methods"], d.get("initial", {}), d.get("timings", {}))


def run_experiment(cfg: ExperimentConfig, methods=None, variant: str = "original",
                   ws: Workspace | None = None) -> Report:
    """Run ``methods`` (default: the config's method plus base) over all replicate seeds."""
    ws = ws or Workspace(cfg.output_dir)
    if methods is None:
        methods = [cfg.method] if cfg.method == "base" else ["base", cfg.method]
    report = Report(variant, cfg.label, cfg.to_dict())
    t0 = time.perf_counter()
    for method in methods:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
        recs = []
        for seed in cfg.seeds:
            rec = run_method(ws, cfg, method, seed)
            log.info("%s %s seed=%d final=%.3f episodes=%s", variant, method, seed, rec["final"]["p_hat"],
                     rec["episodes"])
            recs.append(rec)
        report.methods[method] = {
            "per_seed": recs,
            "pooled_final": _pool_stats(recs, "final"),
            "pooled_max": _pool_stats(recs, "max"),
        }
    for seed in cfg.seeds:
        run = ws.initial(cfg, seed)
        report.initial[str(seed)] = {
            "ckpt_steps": run.train.steps,
            "loss_curve": run.train.loss_curve,
            "rollout_success": {str(k): p.success_rate for k, p in sorted(run.pools.items())},
            "demo_counts": dict(run.demos.mixture),
        }
        report.timings[f"initial_seed{seed}"] = dict(run.timings)
    report.timings["total"] = time.perf_counter() - t0
    return report


def run_demo_score(cfg: ExperimentConfig, ws: Workspace | None = None) -> Report:
    return run_experiment(replace(cfg, method="demo_score"), ws=ws)


def run_baseline(cfg: ExperimentConfig, ws: Workspace | None = None) -> Report:
    return run_experiment(cfg, ws=ws)


def run_ablation_suite(cfg: ExperimentConfig, suite: str, ws: Workspace | None = None) -> list[Report]:
    """One Demo-SCORE report per variant; all variants share initial runs and rollout pools."""
    names = suite_variants(suite)
    ws = ws or Workspace(cfg.output_dir)
    reports = []
    done: dict[str, Report] = {}
    for i, name in enumerate(names):
        vcfg = variant_config(cfg, name)
        key = json.dumps(vcfg.to_dict()["curation"], sort_keys=True)
        if key in done:
            # identical effective settings (e.g. original vs clf_8_8): reuse the records
            src = done[key]
            reports.append(Report(name, src.mixture, vcfg.to_dict(), {"demo_score": src.methods["demo_score"]},
                                  src.initial, {"reused_from": src.variant}))
            continue
        methods = ["base", "demo_score"] if i == 0 else ["demo_score"]
        reports.append(run_experiment(vcfg, methods, variant=name, ws=ws))
        done[key] = reports[-1]
    return reports


def episode_accounting(report: Report) -> dict:
    """Environment episodes per method, summed over seeds."""
    out = {}
    for method, block in report.methods.items():
        tot = {"curation_rollouts": 0, "eval": 0, "total": 0}
        for rec in block["per_seed"]:
            for k in tot:
                tot[k] += rec["episodes"][k]
        out[method] = tot
    return out


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def run_calibration(cfg: ExperimentConfig, n_trials: int = 1000, policy_check: bool = True,
                    n_demos: int = 100, n_eval: int = 200) -> dict:
    """Demonstrator reliability plus pure-strategy BC success over the replicate seeds."""
    rep = calibrate(cfg.env, n_trials, seed=cfg.eval_seed)
    out = {"demonstrators": rep.to_dict(), "policies": {}}
    if not policy_check:
        return out
    for tag in StrategyTag:
        rates = []
        for seed in cfg.seeds:
            demos = build_mixture([(tag, n_demos)], cfg.env, derive_seed(seed, "demos"))
            tr = train_bc(demos, cfg.train, derive_seed(seed, "bc-initial"))
            ro = collect_rollouts(tr.final, cfg.env, n_eval, derive_seed(cfg.eval_seed, "eval", seed))
            rates.append(ro.success_rate)
        out["policies"][tag.value] = {"seeds": list(cfg.seeds), "success": rates}
    return out


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _g(x) -> str:
    return f"{x:.6g}"


SUMMARY_HEADER = ["variant", "mixture", "method", "n_seeds", "n", "successes", "p_hat", "lo", "hi",
                  "p_hat_max", "lo_max", "hi_max"]
COMPOSITION_HEADER = ["variant", "mixture", "seed", "tag", "kept", "discarded"]
PLOTDATA_HEADER = ["variant", "mixture", "method", "seed", "run", "ckpt", "step", "success"]


REPORT_ORDER = ("base", "demo_score", "auto_il", "rcp", "loss_weighting")


def ordered_methods(report: Report) -> list[tuple[str, dict]]:
    """Method blocks in a fixed order, independent of dict insertion order."""
    return sorted(report.methods.items(), key=lambda kv: REPORT_ORDER.index(kv[0]))


def _csv(path: Path, header, rows) -> None:
    lines = [",".join(header)] + [",".join(str(c) for c in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def emit_report(reports: list[Report], out_dir, figures: bool = True) -> list[Path]:
    """Write report.json, summary.csv, composition.csv, plotdata.csv (+ PNG figures)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    summary, comp, plot = [], [], []
    for r in reports:
        for method, block in ordered_methods(r):
            pf, pm = block["pooled_final"], block["pooled_max"]
            summary.append([r.variant, r.mixture, method, len(block["per_seed"]), pf["n"], _g(pf["successes"]),
                            _g(pf["p_hat"]), _g(pf["lo"]), _g(pf["hi"]), _g(pm["p_hat"]), _g(pm["lo"]), _g(pm["hi"])])
            for rec in block["per_seed"]:
                for i, (step, s) in enumerate(zip(rec["ckpt_steps"], rec["ckpt_success"]), 1):
                    run = "initial" if method == "base" else "final"
                    plot.append([r.variant, r.mixture, method, rec["seed"], run, i, step, _g(s["p_hat"])])
                if method == "demo_score":
                    for tag, row in rec["curation"]["composition"].items():
                        comp.append([r.variant, r.mixture, rec["seed"], tag, row["kept"], row["discarded"]])
    paths = [out / "report.json", out / "summary.csv", out / "composition.csv", out / "plotdata.csv"]
    payload = {"schema_version": SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]}
    paths[0].write_text(json.dumps(payload, indent=1, sort_keys=True))
    _csv(paths[1], SUMMARY_HEADER, summary)
    _csv(paths[2], COMPOSITION_HEADER, comp)
    _csv(paths[3], PLOTDATA_HEADER, plot)
    for r in reports:
        if "demo_score" in r.methods:
            cur = {str(rec["seed"]): rec["curation"] for rec in r.methods["demo_score"]["per_seed"]}
            name = f"curation_{r.variant}_{r.mixture}.json"
            (out / name).write_text(json.dumps(cur, indent=1, sort_keys=True))
            paths.append(out / name)
    if figures and reports:
        from .plots import render_figures

        paths += render_figures(reports, out)
    return paths


def load_reports(in_dir) -> list[Report]:
    path = Path(in_dir) / "report.json"
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    return [Report.from_dict(d) for d in payload["reports"]]


def pooled_table(reports: list[Report]) -> list[tuple]:
    rows = []
    for r in reports:
        for method, block in ordered_methods(r):
            pf = block["pooled_final"]
            rows.append((r.variant, r.mixture, method, pf["p_hat"], pf["lo"], pf["hi"]))
    return rows


def tag_score_gap(curation: dict, demos: DemoDataset) -> float:
    """Mean episode score of WideA demos minus that of NarrowB demos."""
    scores = curation["scores"]
    by_tag: dict[str, list[float]] = {}
    for t in demos:
        if t.id in scores:
            by_tag.setdefault(t.tag.value, []).append(scores[t.id])
    wide = by_tag.get("WideA", [np.nan])
    narrow = by_tag.get("NarrowB", [np.nan])
    return float(np.mean(wide) - np.mean(narrow))
