"""End-to-end acceptance checks, one test per criterion.

Every test records a one-line verdict that ``conftest.py`` prints in the
terminal summary, so a plain ``pytest`` run shows the whole scoreboard.
"""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from inffor import experiments, nn
from inffor.cli import main
from inffor.data import Dataset
from inffor.influence import EstimatorConfig, LissaConfig, batch_influence
from inffor.mitigation import MITIGATED, SAFEGUARD_TRIPPED, mitigate
from inffor.robust import Q_CONSISTENCY, q_estimator, q_order_statistic_brute, q_order_statistic_fast
from inffor.trainer import Checkpoint, CheckpointStore, TrainConfig, derive_seed, train

import oracles

RESULTS: dict[int, str] = {}
CONFIGS = Path(__file__).resolve().parents[1] / "scripts" / "configs"


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])


def test_criterion_01_loss_derivative_ordering():
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    violations = 0
    for y in (0, 1):
        a, b = r.normal(0.0, 6.0, size=(2, 10_000, 1))
        labels = np.full(10_000, y)
        la, lb = nn.losses(a, labels, "bce_single_logit"), nn.losses(b, labels, "bce_single_logit")
        da = np.abs(nn.dloss_da(a, labels, "bce_single_logit")).ravel()
        db = np.abs(nn.dloss_da(b, labels, "bce_single_logit")).ravel()
        violations += int(np.sum((la < lb) & ~(da < db))) + int(np.sum((lb < la) & ~(db < da)))
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 1.0
    record(1, ok, f"{violations} violations over 2 x 10^4 pairs in {elapsed:.2f}s")
    assert ok


def _fd_draw(arch, seed):
    r = np.random.default_rng(seed)
    k = int(r.integers(2, 4))
    d = int(r.integers(1, 6))
    hidden = tuple(int(h) for h in r.integers(1, 5, size=int(r.integers(1, 3)))) if arch == "mlp" else ()
    spec = nn.ModelSpec(arch, d, k, hidden, ["relu", "tanh"][r.integers(2)], float(r.choice([0.0, 1e-2])))
    theta = r.normal(size=spec.num_params)
    x = r.normal(size=d)
    y = int(r.integers(k))
    g = nn.grad(spec, theta, (x, y)).values
    fd = oracles.fd_gradient(lambda t: nn.example_losses(spec, t, x, [y])[0], theta)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8))


def test_criterion_02_gradient_oracle():
    t0 = time.perf_counter()
    worst = max(_fd_draw(arch, derive_seed(7, i)) for arch in ("linear", "mlp") for i in range(100))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 10.0
    record(2, ok, f"worst relative FD error {worst:.2e} over 200 draws in {elapsed:.2f}s")
    assert ok


def test_criterion_03_q_estimator():
    t0 = time.perf_counter()
    r = np.random.default_rng(3)
    mismatches = 0
    for i in range(1000):
        n = int(r.integers(2, 501))
        v = r.normal(size=n) if i % 2 else r.integers(-20, 20, size=n).astype(np.float64)
        mismatches += q_order_statistic_fast(v) != q_order_statistic_brute(v)
    q = q_estimator(np.random.default_rng(0).normal(size=100_000))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and 0.98 <= q <= 1.02 and Q_CONSISTENCY == 2.2219 and elapsed < 30.0
    record(3, ok, f"{mismatches} fast/brute mismatches on 10^3 vectors, Gaussian Q = {q:.4f}, {elapsed:.1f}s")
    assert ok


def test_criterion_04_tracin_fidelity():
    r = np.random.default_rng(4)
    X = np.vstack([r.normal(-1.5, 1.0, size=(25, 3)), r.normal(1.5, 1.0, size=(25, 3))])
    y = np.r_[np.zeros(25, int), np.ones(25, int)]
    ds = Dataset.from_arrays(X, y, 2)
    spec = nn.ModelSpec("linear", 3, 2)
    cfg = TrainConfig("sgd", 1e-4, batch_size=1, epochs=2, subepoch_checkpoints=50, seed=1, record_batches=True)
    params, store, log = train(spec, ds, cfg)
    x_te = r.normal(size=3)
    pred = int(nn.predict(spec, params, x_te)[0])
    iv = batch_influence(store, ds, x_te[None, :], [0], EstimatorConfig("tracin", "none"), log)[0]
    # exact trace: replay SGD from the initial parameters and credit each step's test-loss drop to its example
    theta = store.entries[0].params.copy()
    exact = np.zeros(len(ds))
    for batch in log.batches:
        i = ds.index_of(batch)
        after = theta - 1e-4 * nn.per_example_grads(spec, theta, ds.X[i], ds.y[i]).mean(axis=0)
        drop = nn.example_losses(spec, theta, x_te, [pred])[0] - nn.example_losses(spec, after, x_te, [pred])[0]
        exact[i] += drop
        theta = after
    np.testing.assert_allclose(theta, store.final, rtol=1e-12, atol=1e-15)
    rel = np.abs(iv.values - exact) / np.abs(exact)
    ok = bool(rel.max() <= 0.01)
    record(4, ok, f"max per-point relative error {rel.max():.2e} over {len(ds)} points")
    assert ok


def test_criterion_05_influence_functions_loo():
    r = np.random.default_rng(5)
    n, d, lam = 30, 5, 0.1
    X = r.normal(size=(n, d))
    y = (X @ r.normal(size=d) + 0.5 * r.normal(size=n) > 0).astype(int)
    theta = oracles.logreg_fit(X, y, lam)
    spec = nn.ModelSpec("linear", d, 2, weight_decay=lam)
    ds = Dataset.from_arrays(X, y, 2)
    store = CheckpointStore(spec, [Checkpoint(0, 1.0, theta)], theta, n)
    x_te = r.normal(size=d)
    y_te = int(nn.predict(spec, theta, x_te)[0])
    lissa = LissaConfig(damp=0.0, scale=5.0, depth=600, repeats=20, batch_size=400, seed=0)
    est = batch_influence(store, ds, x_te[None, :], [0], EstimatorConfig("if", "none", lissa))[0].values
    base = oracles.logreg_loss(theta, x_te, y_te)
    loo = np.array([oracles.logreg_loss(oracles.logreg_fit(np.delete(X, i, 0), np.delete(y, i), lam), x_te, y_te)
                    - base for i in range(n)])
    rho = oracles.spearman(est, loo)
    # LiSSA against the dense solve on the same model and test gradient
    g = nn.per_example_grads(spec, theta, x_te, [y_te])[0]
    dense = np.linalg.solve(nn.dense_hessian(spec, theta, X, y), g)
    approx = nn.lissa_inverse_hvp(spec, theta, X, y, g, 0.0, 5.0, 600, 20, rng=0, batch_size=400)
    lissa_err = float(np.max(np.abs(approx - dense) / np.abs(dense)))
    ok = rho >= 0.9 and lissa_err <= 0.02
    record(5, ok, f"Spearman vs exact LOO {rho:.3f}, LiSSA max relative error {lissa_err:.2%}")
    assert ok


def test_criterion_06_toy_renormalization():
    t0 = time.perf_counter()
    cfg = experiments.ToyRenormConfig()
    trials = [experiments.run_toy_renorm(cfg, derive_seed(0, t)) for t in range(30)]
    mean = {k: m for k, (m, _) in experiments.summarize(trials).items()}
    elapsed = time.perf_counter() - t0
    checks = [mean["GAS"] > mean["TracInCP"], mean["IF-Rn"] > mean["IF"], mean["RP-Rn"] > mean["RP"],
              mean["GAS"] >= 0.9, elapsed < 300]
    ok = all(checks)
    table = ", ".join(f"{k} {v:.3f}" for k, v in mean.items())
    record(6, ok, f"mean AUPRC over 30 seeds: {table}; {elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def backdoor_trials():
    cfg = experiments.BackdoorConfig()
    t0 = time.perf_counter()
    rows = []
    for s in range(10):
        run = experiments.backdoor_run(cfg, s)
        tid = experiments.run_target_id(cfg, s, run)
        mit = experiments.run_mitigation(cfg, s, run)
        rows.append((tid, mit))
    return rows, time.perf_counter() - t0


def test_criterion_07_target_identification(backdoor_trials):
    rows, elapsed = backdoor_trials
    fit_key = next(k for k in rows[0][0] if k.startswith("FIT-"))
    fit = float(np.mean([t[fit_key] for t, _ in rows]))
    base = {k: float(np.mean([t[k] for t, _ in rows])) for k in ("max_knn", "min_knn", "most_certain",
                                                               "least_certain")}
    ok = fit >= 0.9 and all(fit > v for v in base.values()) and elapsed < 600
    detail = ", ".join(f"{k} {v:.3f}" for k, v in base.items())
    record(7, ok, f"{fit_key} mean AUPRC {fit:.3f} vs {detail}; 10 seeds (with criterion 8) in {elapsed:.0f}s")
    assert ok


def test_criterion_08_mitigation(backdoor_trials):
    rows, _ = backdoor_trials
    per_seed = []
    for s, (tid, m) in enumerate(rows):
        good = (m["status"] == MITIGATED and m["target_pred"] != m["adversarial_label"]
                and m["adv_removed"] >= 0.8 and m["clean_removed"] <= 0.02
                and m["overall_asr_before"] >= 0.8 and m["overall_asr_after"] < 0.2)
        per_seed.append(good)
    adv = [m["adv_removed"] for _, m in rows]
    clean = [m["clean_removed"] for _, m in rows]
    before = [m["overall_asr_before"] for _, m in rows]
    after = [m["overall_asr_after"] for _, m in rows]
    ok = all(per_seed)
    record(8, ok, f"{sum(per_seed)}/10 seeds pass; adv removed min {min(adv):.2f}, clean removed max "
                  f"{max(clean):.4f}, overall ASR before min {min(before):.2f}, after max {max(after):.2f}")
    assert ok


def test_criterion_09_safeguard(tmp_path):
    cfg = experiments.BackdoorConfig()
    train_set, x, store, log = experiments.availability_setup(cfg, 0)
    mcfg = replace(cfg.mitigation, max_removed_fraction=0.01, estimator=cfg.estimator, train=cfg.train.with_seed(1))
    out = mitigate(store, train_set, x, mcfg, batch_log=log)
    api_ok = out.status == SAFEGUARD_TRIPPED and len(out.removed_ids) <= 0.01 * len(train_set)
    conf = str(CONFIGS / "availability.json")
    ck = tmp_path / "ckpts"
    assert main(["train", "--config", conf, "--out", str(ck)]) == 0
    code = main(["mitigate", "--ckpts", str(ck), "--out", str(tmp_path / "mit")])
    doc = json.loads((tmp_path / "mit" / "mitigation.json").read_text())
    cli_ok = code == 4 and doc["status"] == SAFEGUARD_TRIPPED and doc["removed_total"] <= 0.01 * doc["final_size"] / 0.99
    ok = api_ok and cli_ok
    record(9, ok, f"API status {out.status} after removing {len(out.removed_ids)}/{len(train_set)}; "
                  f"CLI exit code {code}, removed {doc['removed_total']}")
    assert ok


def test_criterion_10_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["repro", "toy-renorm", "--seed", "1", "--trials", "3", "--out", str(d)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    ok = outs[0] == outs[1] and set(outs[0]) == {"auprc.csv", "trials.csv", "config.json"}
    record(10, ok, f"repro toy-renorm --seed 1 twice: {len(outs[0])} files, byte-identical = {outs[0] == outs[1]}")
    assert ok
