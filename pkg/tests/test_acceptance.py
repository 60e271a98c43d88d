"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary.
"""
import csv
import math
import time

import numpy as np
import pytest

from honeymark.config import ExperimentConfig
from honeymark.honeygen import generate_honey
from honeymark.metrics import ScoredOutcome, auroc, auroc_from_scores, stealthiness
from honeymark.pipeline import Pipeline, run_experiment
from oracles import REL_TOL, gradient_case, pair_count_auroc

RESULTS = []


def record(n, name, passed, detail):
    line = f"criterion {n} {'PASS' if passed else 'FAIL'}: {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert passed, line


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _summary(cfg):
    return {r["method"]: r for r in _csv(cfg.output_dir / "report" / "summary.csv")}


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    worst, skipped, checked = 0.0, 0, 0
    for kind in ("mlp", "small_cnn"):
        for seed in range(20):
            r = gradient_case(kind, seed)
            worst = max(worst, r["param_err"], r["input_err"])
            skipped += r["skipped"]
            checked += r["checked"]
    elapsed = time.perf_counter() - start
    ok = worst <= REL_TOL and elapsed < 30.0 and skipped <= 0.01 * (checked + skipped)
    record(1, "gradients vs central differences", ok,
           f"max rel err {worst:.2e} over {checked} coords (40 models, {skipped} kink coords skipped), {elapsed:.1f}s")


def test_criterion_2_auroc_oracle():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        n_pos = int(rng.integers(1, n))
        # a small value pool forces frequent ties
        values = rng.integers(0, rng.integers(2, 8), size=n).astype(float) / 4
        pos, neg = values[:n_pos], values[n_pos:]
        outcomes = [ScoredOutcome(v, 1) for v in pos] + [ScoredOutcome(v, 0) for v in neg]
        if auroc(outcomes) != pair_count_auroc(pos, neg):
            mismatches += 1
    elapsed = time.perf_counter() - start
    record(2, "tie-aware AUROC equals pair counting", mismatches == 0 and elapsed < 5.0,
           f"{mismatches} mismatches in 1000 instances, {elapsed:.2f}s")


def test_criterion_3_budget_invariants(desk_run):
    cfg = desk_run.cfg
    pipe = Pipeline(cfg)
    data = pipe.dataset()
    sel = __import__("json").loads((cfg.output_dir / "hardness" / "selection.json").read_text())
    hard = [data[i] for i in sel["hard_ids"]]
    rest = [data[i] for i in sel["rest_ids"]]
    hcfg = cfg.honey_config(pipe.honey().config.seed)
    X0 = np.stack([s.pixels for s in hard])
    labels = [s.label for s in hard]
    worst = [0.0]
    violations = []

    def check(t, _delta, X):
        off = float(np.max(np.abs(X - X0)))
        worst[0] = max(worst[0], off)
        if off > hcfg.epsilon + 1e-12 or X.min() < 0.0 or X.max() > 1.0:
            violations.append(t)

    hs = generate_honey(hard, rest, cfg.arch("proxy", data.shape, data.num_classes), hcfg, on_iteration=check)
    same_labels = [r.current.label for r in hs.records] == labels
    matches_run = all(a.current.identical_to(b.current) for a, b in zip(hs.records, pipe.honey().records))
    ok = not violations and same_labels and hcfg.iterations == 10 and matches_run
    record(3, "honey budget invariants", ok,
           f"T={hcfg.iterations}, max L-inf {worst[0] * 255:.4f}/255 <= 4/255, {len(violations)} violations, "
           f"labels unchanged={same_labels}, identical to pipeline honey={matches_run}")


def test_criterion_4_stl_bound(desk_run):
    honey = Pipeline(desk_run.cfg).honey()
    stl = [stealthiness(r.original, r.current, "mean_abs", 10.0) for r in honey.records]
    bound = math.exp(-10 * 4 / 255)
    record(4, "STL bound", min(stl) >= bound, f"min STL {min(stl):.4f} >= {bound:.4f} over {len(stl)} honey images")


def test_criterion_5_loss_gap_separation(desk_run):
    cfg = desk_run.cfg
    ratios, details = [], []
    for i in range(cfg.num_model_pairs):
        rows = _csv(cfg.output_dir / "verify" / "honeyimage" / f"pair{i}_gaps.csv")
        honey = np.median([float(r["gap"]) for r in rows if r["group"] == "honey"])
        rand = np.median([float(r["gap"]) for r in rows if r["group"] == "random"])
        ratios.append(honey / abs(rand))
        details.append(f"{honey:.3g}/{abs(rand):.3g}")
    # the same comparison with the rest-model gap of the verification rule
    pipe = Pipeline(cfg)
    honey_gaps = [float(r["loss_gap"]) for r in _csv(cfg.output_dir / "verify" / "honeyimage" / "pair0_infringing.csv")]
    data = pipe.dataset()
    rand_ids = [r["sample_id"] for r in _csv(cfg.output_dir / "verify" / "honeyimage" / "pair0_gaps.csv") if r["group"] == "random"]
    from honeymark.diffnet import sample_losses

    X = np.stack([data[i].pixels for i in rand_ids])
    y = [data[i].label for i in rand_ids]
    inf = pipe._ckpt("train-pair", "pair0/infringing.ckpt")
    rand_gaps = sample_losses(pipe.honey().rest_model, X, y) - sample_losses(inf, X, y)
    rest_ratio = np.median(honey_gaps) / abs(np.median(rand_gaps))
    ok = min(ratios) >= 10 and rest_ratio >= 10 and desk_run.elapsed < 600
    record(5, "loss-gap separation", ok,
           f"compliant-minus-infringing median ratios {', '.join(f'{r:.0f}x' for r in ratios)} ({'; '.join(details)}); "
           f"rest-model gap ratio {rest_ratio:.0f}x; desk pipeline {desk_run.elapsed:.0f}s")


def test_criterion_6_effectiveness_ordering(desk_run):
    s = _summary(desk_run.cfg)
    hi, mi, bn = s["honeyimage"], s["mi_loss"], s["badnets"]
    au, au_mi = float(hi["auroc"]), float(mi["auroc"])
    hl, hl_bn = float(hi["hl"]), float(bn["hl"])
    ok = au >= 0.85 and au - au_mi >= 0.1 and hl >= 0.8 and hl_bn <= 0.3
    record(6, "effectiveness ordering", ok,
           f"HoneyImage AUROC {au:.3f} vs MI {au_mi:.3f} (margin {au - au_mi:.3f}); HL {hl:.3f} vs BadNets {hl_bn:.3f}")


@pytest.mark.slow
def test_criterion_7_architecture_transfer(desk_run, tmp_path_factory):
    base = tmp_path_factory.mktemp("transfer")
    mlp, cnn = {"kind": "mlp"}, {"kind": "small_cnn"}

    def run(proxy, suspicious, name):
        doc = {"proxy": {"arch": proxy}, "suspicious": {"arch": suspicious}, "methods": ["honeyimage"]}
        cfg = ExperimentConfig.from_dict(doc, base_dir=base, output_dir=base / name)
        run_experiment(cfg)
        return float(_summary(cfg)["honeyimage"]["auroc"])

    m2m = float(_summary(desk_run.cfg)["honeyimage"]["auroc"])
    m2c = run(mlp, cnn, "mlp_to_cnn")
    c2c = run(cnn, cnn, "cnn_to_cnn")
    c2m = run(cnn, mlp, "cnn_to_mlp")
    d1, d2 = abs(m2c - m2m), abs(c2m - c2c)
    record(7, "architecture transfer", d1 <= 0.15 and d2 <= 0.15,
           f"mlp proxy: mlp {m2m:.3f} / cnn {m2c:.3f} (diff {d1:.3f}); "
           f"cnn proxy: cnn {c2c:.3f} / mlp {c2m:.3f} (diff {d2:.3f})")


def test_criterion_8_trivial_identities(desk_run):
    cfg = desk_run.cfg
    pipe = Pipeline(cfg)
    data = pipe.dataset()
    sel = __import__("json").loads((cfg.output_dir / "hardness" / "selection.json").read_text())
    hard = [data[i] for i in sel["hard_ids"]]
    rest = [data[i] for i in sel["rest_ids"]]
    arch = cfg.arch("proxy", data.shape, data.num_classes)
    base = cfg.honey_config(1)
    rest_model = pipe.honey().rest_model
    t0 = generate_honey(hard, rest, arch, type(base)(0, base.epsilon, base.step_size, base.inner_train, 1), rest_model)
    e0 = generate_honey(hard, rest, arch, type(base)(base.iterations, 0.0, base.step_size, base.inner_train, 1), rest_model)
    t0_ok = all(r.current.identical_to(r.original) for r in t0.records)
    e0_ok = all(r.current.identical_to(r.original) for r in e0.records)
    comp = [
        [float(r["loss_gap"]) for r in _csv(cfg.output_dir / "verify" / "honeyimage" / f"pair{i}_compliant.csv")]
        for i in range(cfg.num_model_pairs)
    ]
    n = len(comp)
    null = [auroc_from_scores(comp[i], comp[(i + 1) % n]) for i in range(n)]
    mean_null = float(np.mean(null))
    ok = t0_ok and e0_ok and abs(mean_null - 0.5) <= 0.15
    record(8, "trivial-configuration identities", ok,
           f"T=0 bitwise={t0_ok}, eps=0 bitwise={e0_ok}, compliant-vs-compliant AUROC {mean_null:.3f} "
           f"(pairs {', '.join(f'{v:.3f}' for v in null)})")


def test_criterion_9_determinism(desk_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("determinism")
    cfg = ExperimentConfig.from_dict({}, base_dir=out, output_dir=out / "run")
    start = time.perf_counter()
    run_experiment(cfg)
    elapsed = time.perf_counter() - start
    a = (desk_run.cfg.output_dir / "report" / "summary.csv").read_bytes()
    b = (cfg.output_dir / "report" / "summary.csv").read_bytes()
    record(9, "determinism", a == b, f"summary CSVs bitwise identical={a == b} ({len(a)} bytes), second run {elapsed:.0f}s")
