"""Acceptance suite: one test and one printed PASS/FAIL line per criterion.

Criteria 4-10 and 12 share full-scale runs (5 replicate seeds, 256
evaluation episodes per checkpoint) through the session ``experiments``
fixture, so the first test that needs a run pays for it.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import BASELINE_METHODS, record_verdict
from demoscore.baselines import normalize_inverse_loss
from demoscore.cli import main
from demoscore.curator import Normalizer, QualityClassifier, compute_threshold, step_loss
from demoscore.datamodel import DemoSource, Trajectory
from demoscore.envsim import StrategyTag
from demoscore.numcore import MlpParams, RngStream, derive_seed, init_mlp, mlp_backward, mlp_forward
from demoscore.pipeline import tag_score_gap
from demoscore.policy import init_policy, nll_and_grad, wilson_interval

pytestmark = pytest.mark.slow

HEADLINE_MARGIN = 0.15
BUDGET_SLACK = 0.10
VARIANT_BAND = 0.25
FIDELITY = 0.80
FORMULA_TOL = 1e-10
GRAD_TOL = 1e-4

MIXTURE_50 = [["WideA", 50], ["NarrowB", 50]]
MIXTURE_80_20 = [["WideA", 80], ["NarrowB", 20]]
MIXTURE_20_80 = [["WideA", 20], ["NarrowB", 80]]
TOTALITY_VARIANTS = ["chunk", "trajectory", "plateau", "no_reg", "clf_8_8", "clf_8_8_8", "clf_16_16",
                     "clf_16_16_16", "clf_32_32", "clf_32_32_32"]


def _pooled(report, method):
    return report.pooled(method)


def _finals(report, method):
    return [r["final"]["p_hat"] for r in report.methods[method]["per_seed"]]


# --- 1 ---------------------------------------------------------------------

def _max_rel_err(arrays, grads, loss, eps=1e-5):
    worst = 0.0
    for a, g in zip(arrays, grads):
        flat, gf = a.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            lp = loss()
            flat[j] = old - eps
            lm = loss()
            flat[j] = old
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(num - gf[j]) / max(abs(num), abs(gf[j]), 1e-6))
    return worst


def _bce_case(i):
    r = RngStream(derive_seed(1, "bce", i))
    sizes = [3] + [2 + int(v) for v in r.integers(2, 7)] + [1]
    p = init_mlp(sizes, r, "sigmoid")
    x = r.gaussian(15).reshape(5, 3)
    y = r.uniform(5)

    def loss():
        q, _ = mlp_forward(p, x)
        q = q[:, 0]
        return float(np.sum(-y * np.log(q) - (1 - y) * np.log(1 - q)))

    q, cache = mlp_forward(p, x)
    g, _ = mlp_backward(p, cache, (q[:, 0] - y)[:, None], through_head=False)
    return _max_rel_err(p.arrays(), g.arrays(), loss)


def _mdn_case(i):
    r = RngStream(derive_seed(1, "mdn", i))
    k = 1 + int(r.integers(1, 3)[0])
    p = init_policy(3, r, n_components=k, hidden=(5, 4))
    for a in p.net.arrays():
        a += 0.3 * r.gaussian(a.size).reshape(a.shape)
    x = r.gaussian(15).reshape(5, 3)
    act = 0.03 * r.gaussian(10).reshape(5, 2)
    _, g = nll_and_grad(p, x, act)

    def loss():
        return float(nll_and_grad(p, x, act, need_grad=False)[0].mean())

    return _max_rel_err(p.net.arrays(), g.arrays(), loss)


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    errs = [_bce_case(i) for i in range(50)] + [_mdn_case(i) for i in range(50)]
    dt = time.perf_counter() - t0
    worst = max(errs)
    ok = worst <= GRAD_TOL and dt < 10.0 and len(errs) == 100
    record_verdict(1, "gradient check", ok, f"100 cases, max rel err {worst:.2e} (<= {GRAD_TOL}), {dt:.1f}s (< 10s)")
    assert ok


# --- 2 ---------------------------------------------------------------------

def _x_classifier():
    mlp = MlpParams([np.array([[1.0, 0.0, 0.0]])], [np.zeros(1)], "sigmoid")
    return QualityClassifier(mlp, Normalizer(np.zeros(3), np.ones(3)))


def _traj(tid, probs):
    s = np.array([[math.log(p / (1 - p)), 0.0, 0.0] for p in probs])
    return Trajectory(tid, s, np.zeros((len(probs), 2)), 1.0, DemoSource(StrategyTag.WIDE_A))


def _wilson_oracle(k, n, z=1.6449):
    ph = k / n
    a, b, c = 1 + z * z / n, -(2 * ph + z * z / n), ph * ph
    d = math.sqrt(b * b - 4 * a * c)
    return max(0.0, (-b - d) / (2 * a)), min(1.0, (-b + d) / (2 * a))


def test_criterion_02_formula_oracles():
    t0 = time.perf_counter()
    clf = _x_classifier()
    errs = {}
    errs["step_loss"] = abs(step_loss(clf, _traj("a", [0.9, 0.8, 0.5]), 1.0)
                            - (-(math.log(0.9) + math.log(0.8) + math.log(0.5)) / 3))
    gamma = compute_threshold(clf, [_traj("a", [0.5, 0.5]), _traj("b", [1 - 1e-13])])
    errs["threshold"] = abs(gamma - (0.5 + 0.5 + (1 - 1e-13)) / 3)
    w = []
    for k, n in [(0, 30), (24, 30), (30, 30), (7, 256)]:
        lo, hi = wilson_interval(k, n)
        olo, ohi = _wilson_oracle(k, n)
        w += [abs(lo - olo), abs(hi - ohi)]
    errs["wilson"] = max(w)
    raw = np.array([1.0, 0.5])
    expected = (raw - raw.min()) / math.sqrt(((raw - raw.mean()) ** 2).mean())
    errs["loss_weighting"] = float(np.abs(normalize_inverse_loss([1.0, 2.0]) - expected).max())
    dt = time.perf_counter() - t0
    ok = max(errs.values()) <= FORMULA_TOL and abs(gamma - 2 / 3) <= FORMULA_TOL and dt < 5.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record_verdict(2, "formula oracles", ok, f"{detail} (<= {FORMULA_TOL}); {dt:.2f}s (< 5s)")
    assert ok


# --- 3 ---------------------------------------------------------------------

def test_criterion_03_calibration(capsys):
    t0 = time.perf_counter()
    code = main(["calibrate", "--trials", "1000"])
    out = capsys.readouterr().out
    dt = time.perf_counter() - t0
    result = json.loads(out[: out.rindex("calibration")])
    rates = result["demonstrators"]["success_rate"]
    narrow = result["policies"]["NarrowB"]["success"]
    wide = result["policies"]["WideA"]["success"]
    ok = (
        code == 0
        and min(rates.values()) >= 0.99
        and sum(r <= 0.5 for r in narrow) >= 3
        and sum(r >= 0.9 for r in wide) >= 3
        and dt < 600
    )
    record_verdict(3, "environment calibration", ok,
                   f"demonstrators {rates}; NarrowB BC {narrow}; WideA BC {wide}; {dt:.0f}s (< 600s)")
    assert ok


# --- 4 ---------------------------------------------------------------------

def test_criterion_04_headline_margin(experiments):
    rep, dt = experiments.get(["base", "demo_score"])
    ds, base = _pooled(rep, "demo_score"), _pooled(rep, "base")
    margin = ds["p_hat"] - base["p_hat"]
    disjoint = ds["lo"] > base["hi"]
    ok = margin >= HEADLINE_MARGIN and disjoint and dt < 1800
    record_verdict(4, "headline margin", ok,
                   f"demo_score {ds['p_hat']:.3f} [{ds['lo']:.3f},{ds['hi']:.3f}] vs base {base['p_hat']:.3f} "
                   f"[{base['lo']:.3f},{base['hi']:.3f}], margin {margin:+.3f} (>= {HEADLINE_MARGIN}), "
                   f"{dt:.0f}s (< 1800s)")
    assert ok


# --- 5 ---------------------------------------------------------------------

def test_criterion_05_filter_fidelity(experiments):
    rep, _ = experiments.get(["base", "demo_score"])
    good = []
    parts = []
    for rec in rep.methods["demo_score"]["per_seed"]:
        comp = rec["curation"]["composition"]
        nb = comp["NarrowB"]["discarded"] / (comp["NarrowB"]["kept"] + comp["NarrowB"]["discarded"])
        wa = comp["WideA"]["kept"] / (comp["WideA"]["kept"] + comp["WideA"]["discarded"])
        good.append(nb >= FIDELITY and wa >= FIDELITY)
        parts.append(f"s{rec['seed']}: NarrowB discarded {nb:.2f}, WideA kept {wa:.2f}")
    ok = sum(good) >= 4
    record_verdict(5, "filter fidelity", ok, f"{sum(good)}/5 seeds meet both >= {FIDELITY}; " + "; ".join(parts))
    assert ok


# --- 6 ---------------------------------------------------------------------

def _ranks(v):
    order = np.argsort(v, kind="stable")
    r = np.empty(len(v))
    r[order] = np.arange(len(v))
    for val in set(v):  # average ties
        idx = [i for i, x in enumerate(v) if x == val]
        r[idx] = np.mean(r[idx])
    return r


def spearman(a, b):
    ra, rb = _ranks(list(a)), _ranks(list(b))
    ra, rb = ra - ra.mean(), rb - rb.mean()
    return float((ra * rb).sum() / math.sqrt((ra * ra).sum() * (rb * rb).sum()))


def _discarded(rep):
    return sum(len(r["curation"]["discarded"]) for r in rep.methods["demo_score"]["per_seed"])


def test_criterion_06_lopsided_mixtures(experiments):
    checks, narrow_counts, discarded, parts = [], [], [], []
    for mixture in (MIXTURE_80_20, MIXTURE_50, MIXTURE_20_80):
        rep, _ = experiments.get(["base", "demo_score"], mixture=mixture)
        narrow_counts.append(mixture[1][1])
        discarded.append(_discarded(rep))
        if mixture is not MIXTURE_50:
            ds, base = _finals(rep, "demo_score"), _finals(rep, "base")
            per_seed = [d >= b for d, b in zip(ds, base)]
            checks.append(all(per_seed))
            parts.append(f"{rep.mixture}: demo_score {np.round(ds, 3).tolist()} vs base {np.round(base, 3).tolist()}")
    rho = spearman(narrow_counts, discarded)
    ok = all(checks) and rho == 1.0
    record_verdict(6, "lopsided mixtures", ok,
                   "; ".join(parts) + f"; discarded {discarded} for NarrowB {narrow_counts}, Spearman {rho:.2f}")
    assert ok


# --- 7 ---------------------------------------------------------------------

def test_criterion_07_method_ordering(experiments):
    main_rep, _ = experiments.get(["base", "demo_score"])
    bl_rep, _ = experiments.get(BASELINE_METHODS)
    p = {m: _pooled(main_rep, m)["p_hat"] for m in ("base", "demo_score")}
    p.update({m: _pooled(bl_rep, m)["p_hat"] for m in BASELINE_METHODS})
    ok = all(p["demo_score"] >= p[m] for m in BASELINE_METHODS) and p["auto_il"] >= p["base"]
    record_verdict(7, "method ordering", ok, ", ".join(f"{m} {v:.3f}" for m, v in p.items()))
    assert ok


# --- 8 ---------------------------------------------------------------------

def test_criterion_08_rollout_budget(experiments):
    main_rep, _ = experiments.get(["base", "demo_score"])
    ten, _ = experiments.get(["demo_score"], variant="rollouts_10")
    base = _pooled(main_rep, "base")["p_hat"]
    m50 = _pooled(main_rep, "demo_score")["p_hat"] - base
    m10 = _pooled(ten, "demo_score")["p_hat"] - base
    used = {r["episodes"]["curation_rollouts"] for r in ten.methods["demo_score"]["per_seed"]}
    ok = m10 >= m50 - BUDGET_SLACK and used == {10 * 3 + 50}
    record_verdict(8, "rollout budget", ok,
                   f"margin M=50 {m50:+.3f}, M=10 {m10:+.3f} (drop <= {BUDGET_SLACK}); curation rollouts {sorted(used)}")
    assert ok


# --- 9 ---------------------------------------------------------------------

def _mean_gap(experiments, rep):
    cfg = experiments.config()
    gaps = []
    for rec in rep.methods["demo_score"]["per_seed"]:
        demos = experiments.ws.initial(cfg, rec["seed"]).demos
        gaps.append(tag_score_gap(rec["curation"], demos))
    return float(np.mean(gaps))


def test_criterion_09_cross_validation(experiments):
    main_rep, _ = experiments.get(["base", "demo_score"])
    no_cv, _ = experiments.get(["demo_score"], variant="no_cv")
    p_orig, p_nocv = _pooled(main_rep, "demo_score")["p_hat"], _pooled(no_cv, "demo_score")["p_hat"]
    g_orig, g_nocv = _mean_gap(experiments, main_rep), _mean_gap(experiments, no_cv)
    ok = p_nocv < p_orig or g_nocv < g_orig
    record_verdict(9, "cross-validation necessity", ok,
                   f"success original {p_orig:.3f} vs no_cv {p_nocv:.3f}; "
                   f"WideA-NarrowB score gap original {g_orig:.3f} vs no_cv {g_nocv:.3f}")
    assert ok


# --- 11 --------------------------------------------------------------------

def test_criterion_11_determinism(tmp_path, capsys):
    cfg = {"seeds": [0, 1], "eval_n": 64, "train": {"steps": 4000}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(["run", "--config", str(path), "--out", str(out), "--no-figures"]) == 0
        outs.append(out)
    capsys.readouterr()
    cur = [sorted(o.glob("curation_*.json")) for o in outs]
    same_cur = len(cur[0]) == 1 and [p.read_bytes() for p in cur[0]] == [p.read_bytes() for p in cur[1]]
    same_sum = (outs[0] / "summary.csv").read_bytes() == (outs[1] / "summary.csv").read_bytes()
    ok = same_cur and same_sum
    record_verdict(11, "determinism", ok, f"curation JSON identical: {same_cur}; summary.csv identical: {same_sum}")
    assert ok


# --- 12 --------------------------------------------------------------------

def test_criterion_12_variant_totality(experiments):
    main_rep, _ = experiments.get(["base", "demo_score"])
    ref = _pooled(main_rep, "demo_score")["p_hat"]
    results, failures = {}, []
    for v in TOTALITY_VARIANTS:
        try:
            rep, _ = experiments.get(["demo_score"], variant=v)
            results[v] = _pooled(rep, "demo_score")["p_hat"]
        except Exception as e:  # totality: any error is a failure of this criterion
            failures.append(f"{v}: {type(e).__name__}: {e}")
    within = {v: abs(p - ref) <= VARIANT_BAND for v, p in results.items()}
    ok = not failures and all(within.values())
    detail = ", ".join(f"{v} {p:.3f}" for v, p in results.items())
    record_verdict(12, "variant totality", ok, f"original {ref:.3f}; {detail}; band {VARIANT_BAND}"
                   + (f"; errors: {failures}" if failures else ""))
    assert ok


# --- 10 (checked over every run made above) ----------------------------------

def test_criterion_10_selection_invariant(experiments):
    # make sure the shared runs exist even when this test runs alone
    experiments.get(["base", "demo_score"])
    n_runs, bad = 0, []
    for rep in experiments.all_reports():
        if "demo_score" not in rep.methods:
            continue
        for rec in rep.methods["demo_score"]["per_seed"]:
            sel = rec["selection"]
            floor = min(c["min_val_history"] for c in sel["candidates"])
            chosen = [c for c in sel["candidates"] if c["ckpt"] == sel["chosen_ckpt"]]
            n_runs += 1
            if not chosen or chosen[0]["val_loss"] != floor:
                bad.append(f"{rep.variant}/{rep.mixture}/s{rec['seed']}")
    ok = n_runs > 0 and not bad
    record_verdict(10, "selection invariant", ok, f"{n_runs} runs checked, violations {bad or 'none'}")
    assert ok
