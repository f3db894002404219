"""Acceptance gate: one test per criterion, each recorded for the summary block.

Multi-seed trials use M=2000 sampled masks per attribution to keep the gate
under a few minutes; the thresholds are the stated ones.
"""
import json
import time

import numpy as np
import pytest

from headflow.attribution import (
    ENParams,
    SamplingSpec,
    attribute,
    coefficient_ranking,
    exhaustive_masks,
    fit_dataset,
    normalize_pi,
)
from headflow.cli import main
from headflow.evaluation import (
    COMPLETENESS_BELOW,
    FAITH_GRID,
    FAITHFULNESS_ABOVE,
    attention_ranking,
    causal_ranking,
    curves,
    min_components,
    random_ranking,
    single_ablation_effects,
    sweep,
)
from headflow.intervention import InterventionPlan, compute_baseline_kv
from headflow.model import forward
from headflow.numerics import elastic_net_fit, ols_fit
from headflow.oracle import LinearOracle, ModelOracle
from headflow.synthetic import ANY_ONE, EXCLUSIVE
from headflow.tokenflow import image_token_attribution, select_core_heads, text_token_effects, weighted_attention_map
from helpers import make_bundle, random_wiring

TRIALS = 20
M_TRIAL = 2000


def _min_or_inf(curve, mode, t):
    k = min_components(curve, mode, t)
    return np.inf if k is None else k


def test_c1_exact_linear_recovery(record):
    N = 64
    rng = np.random.default_rng(0)
    sparse = np.zeros(N)
    sparse[rng.choice(N, 6, replace=False)] = rng.uniform(0.05, 0.3, 6)
    dense = rng.uniform(-0.05, 0.1, N)
    worst, worst_r2, worst_t = 0.0, 1.0, 0.0
    for theta in (sparse, dense):
        lin = LinearOracle(theta, bias=0.125)
        spec = SamplingSpec(N, n_samples=1280, seed=1, scheme="bernoulli")
        t0 = time.perf_counter()
        # the oracle already returns pi, so the normalization is the identity
        res = attribute(lin, spec, ENParams(alpha=1e-8, tol=1e-12, max_iter=100000), anchors=(0.0, 1.0))
        worst_t = max(worst_t, time.perf_counter() - t0)
        worst = max(worst, float(np.max(np.abs(res.theta - theta))))
        worst_r2 = min(worst_r2, res.fit.test_r2)
    ok = worst <= 1e-4 and worst_r2 >= 0.999999 and worst_t < 5.0
    record(1, ok, f"max|dtheta|={worst:.2e} (<=1e-4) test_r2={worst_r2:.9f} time={worst_t:.2f}s")
    assert ok


def test_c2_solver_equivalence(record):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        N = int(rng.integers(2, 33))
        M = 4 * N + int(rng.integers(0, 100))
        while True:
            X = (rng.random((M, N)) < 0.5).astype(float)
            if np.linalg.matrix_rank(np.column_stack([X, np.ones(M)])) == N + 1:
                break
        y = X @ rng.standard_normal(N) + rng.standard_normal(M)
        theta, _ = ols_fit(X, y)
        fit = elastic_net_fit(X, y, alpha=0.0, max_iter=500000, tol=1e-14)
        worst = max(worst, float(np.max(np.abs(fit.theta - theta))))
    ok = worst <= 1e-8
    record(2, ok, f"max|en - ols|={worst:.2e} over 50 instances (<=1e-8)")
    assert ok


def test_c3_exhaustive_vs_sampled(record):
    b = make_bundle(seed=0)
    oracle = ModelOracle(b.config, b.model.weights, b.seq, b.baseline)
    t0 = time.perf_counter()
    anchors = oracle.anchors()
    sampled = attribute(oracle, SamplingSpec(16, n_samples=4000, seed=0), anchors=anchors)
    allm = exhaustive_masks(16)
    values = normalize_pi(oracle.evaluate_batch([oracle.query(m) for m in allm]), anchors)
    idx = np.arange(allm.shape[0])
    full = fit_dataset(allm, values, idx, idx, ENParams())
    elapsed = time.perf_counter() - t0
    diff = float(np.max(np.abs(sampled.theta - full.theta)))
    ok = diff <= 0.05 and sampled.fit.test_r2 >= 0.95 and elapsed < 120
    record(3, ok, f"max|dtheta|={diff:.4f} (<=0.05) heldout_r2={sampled.fit.test_r2:.4f} time={elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def exclusive_trials():
    out = []
    for seed in range(TRIALS):
        b = make_bundle(EXCLUSIVE, seed, random_wiring(seed), signal_tokens=(seed % 16,))
        res = attribute(b.oracle, SamplingSpec(16, n_samples=M_TRIAL, seed=seed), anchors=b.anchors)
        out.append((b, res))
    return out


def test_c4_ground_truth_heads(exclusive_trials, record):
    top_ok = min_ok = beat = 0
    for seed, (b, res) in enumerate(exclusive_trials):
        rank = coefficient_ranking(res)
        top_ok += sorted(rank[:3]) == b.wired
        k_attr = _min_or_inf(curves(b.oracle, rank, b.anchors).faithfulness, FAITHFULNESS_ABOVE, 0.8)
        min_ok += k_attr == 3
        _, trace = forward(b.config, b.model.weights, b.seq, want_trace=True)
        others = [attention_ranking(trace, b.config.n_image), causal_ranking(b.oracle, b.anchors)]
        others += [random_ranking(16, 1000 * seed + r) for r in range(20)]
        ks = [_min_or_inf(curves(b.oracle, r, b.anchors).faithfulness, FAITHFULNESS_ABOVE, 0.8) for r in others]
        beat += all(k_attr <= k for k in ks)
    ok = top_ok == TRIALS and min_ok == TRIALS and beat >= 19
    record(4, ok, f"top3=S {top_ok}/{TRIALS}, min_heads=3 {min_ok}/{TRIALS}, "
                  f"attr<=all baselines {beat}/{TRIALS} (>=19)")
    assert ok


def test_c5_redundancy(record):
    single_ok = joint_ok = top_ok = comp_ok = 0
    worst_single = worst_joint = 0.0
    for seed in range(TRIALS):
        b = make_bundle(ANY_ONE, seed, random_wiring(seed), signal_tokens=(seed % 16,))
        delta = single_ablation_effects(b.oracle, b.anchors)
        x = np.ones(16, bool)
        x[b.wired] = False
        joint = float(normalize_pi(b.oracle.evaluate(b.oracle.query(x)), b.anchors))
        worst_single = max(worst_single, float(delta.max()))
        worst_joint = max(worst_joint, joint)
        single_ok += bool(np.all(delta < 0.1))
        joint_ok += joint < 0.1
        res = attribute(b.oracle, SamplingSpec(16, n_samples=M_TRIAL, seed=seed), anchors=b.anchors)
        rank = coefficient_ranking(res)
        top_ok += sorted(rank[:3]) == b.wired
        k = _min_or_inf(curves(b.oracle, rank, b.anchors).completeness, COMPLETENESS_BELOW, 0.2)
        comp_ok += k >= 3
    ok = single_ok == TRIALS and joint_ok == TRIALS and top_ok >= 18 and comp_ok == TRIALS
    record(5, ok, f"max single dpi={worst_single:.4f} (<0.1), max joint pi={worst_joint:.2e} (<0.1), "
                  f"top3=S {top_ok}/{TRIALS} (>=18), completeness needs>=3 {comp_ok}/{TRIALS}")
    assert ok


def test_c6_self_calibration(record):
    b = make_bundle(seed=0, n_calibration=10)
    cfg, w, seq = b.config, b.model.weights, b.seq
    base = compute_baseline_kv(cfg, w, [seq])
    clean, _ = forward(cfg, w, seq)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        plan = InterventionPlan(cfg, base, rng.random(16) < 0.5, rng.random(seq.n_text) < 0.5,
                                rng.random(cfg.n_image) < 0.5, n_text=seq.n_text)
        worst = max(worst, float(np.max(np.abs(forward(cfg, w, seq, plan)[0] - clean))))
    ok = worst <= 1e-6
    record(6, ok, f"max|logit diff|={worst:.2e} over 200 plans (<=1e-6)")
    assert ok


def test_c7_anchor_identities(record):
    b = make_bundle(seed=2)
    zero, one = b.anchors
    pz = float(normalize_pi(zero, b.anchors))
    po = float(normalize_pi(one, b.anchors))
    worst = 0.0
    for r in (list(range(16)), random_ranking(16, 1), causal_ranking(b.oracle, b.anchors)):
        pair = curves(b.oracle, r, b.anchors)
        worst = max(worst, abs(pair.faithfulness[0]), abs(pair.faithfulness[-1] - 1),
                    abs(pair.completeness[0] - 1), abs(pair.completeness[-1]))
    ok = pz == 0.0 and po == 1.0 and worst <= 1e-9
    record(7, ok, f"pi(0)={pz} pi(1)={po} curve endpoint err={worst:.1e} (<=1e-9)")
    assert ok


def test_c8_token_flow(record):
    text_ok = argmax_ok = block_ok = 0
    worst_final, worst_other, worst_ratio, worst_block = 1.0, 0.0, 1.0, 0.0
    for seed in range(TRIALS):
        j_star = int(np.random.default_rng([seed, 7]).integers(16))
        b = make_bundle(EXCLUSIVE, seed, random_wiring(seed), signal_tokens=(j_star,))
        heads = attribute(b.oracle, SamplingSpec(16, n_samples=M_TRIAL, seed=seed), anchors=b.anchors)
        core = select_core_heads(b.oracle, heads, 0.8, b.anchors)
        rep = text_token_effects(b.oracle, core.x_star, 0.05, b.anchors)
        d = rep.delta_pi
        worst_final = min(worst_final, float(d[-1]))
        worst_other = max(worst_other, float(d[:-1].max()))
        worst_ratio = min(worst_ratio, rep.retained_ratio)
        text_ok += d[-1] > 0.9 and bool(np.all(d[:-1] < 0.05)) and rep.retained_ratio > 0.95
        img = image_token_attribution(b.oracle, core.x_star, rep.important,
                                      SamplingSpec(16, n_samples=M_TRIAL, seed=seed))
        argmax_ok += int(np.argmax(img.theta)) == j_star
        v = np.ones(16, bool)
        v[j_star] = False
        blocked = float(normalize_pi(b.oracle.evaluate(b.oracle.query(core.x_star, rep.important, v)), img.anchors))
        worst_block = max(worst_block, blocked)
        block_ok += blocked < 0.2
    ok = text_ok == TRIALS and argmax_ok >= 19 and block_ok == TRIALS
    record(8, ok, f"dpi_final min={worst_final:.4f} (>0.9) others max={worst_other:.4f} (<0.05) "
                  f"retained min={worst_ratio:.4f} (>0.95); argmax=j* {argmax_ok}/{TRIALS} (>=19); "
                  f"blocked pi max={worst_block:.4f} (<0.2)")
    assert ok


def test_c9_weighted_map(record):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        L, H, P, Pt = 2, 3, 4, int(rng.integers(1, 6))
        T = P + Pt
        A = rng.random((L, H, T, T))
        A /= A.sum(-1, keepdims=True)
        trace = type("Trace", (), {"attention": A})()
        theta, x = rng.standard_normal(L * H), rng.random(L * H) < 0.6
        dpi, u = rng.standard_normal(Pt), rng.random(Pt) < 0.6
        got = weighted_attention_map(trace, theta, x, dpi, u, P)
        want = np.zeros(P)
        for n in range(L * H):
            for i in range(Pt):
                for j in range(P):
                    want[j] += x[n] * theta[n] * u[i] * dpi[i] * A[n // H, n % H, P + i, j]
        worst = max(worst, float(np.max(np.abs(got - want))))
    ok = worst <= 1e-9
    record(9, ok, f"max|map - loops|={worst:.1e} over 20 traces (<=1e-9)")
    assert ok


@pytest.fixture(scope="module")
def cli_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("accept")
    p = lambda n: str(d / n)
    assert main(["gen", "model", "--out", p("m.hatw"), "--seed", "0"]) == 0
    assert main(["gen", "tasks", "--model", p("m.hatw"), "--out", p("t.json"), "--n", "2"]) == 0
    assert main(["gen", "calibration", "--model", p("m.hatw"), "--out", p("c.json"), "--n", "50"]) == 0
    assert main(["calibrate", "--model", p("m.hatw"), "--calibration", p("c.json"), "--out", p("b.hatw")]) == 0
    return d, ["--model", p("m.hatw"), "--baseline", p("b.hatw"), "--tasks", p("t.json")]


def test_c10_protocol_roundtrip(cli_files, record):
    import sys

    d, common = cli_files
    serve = " ".join([sys.executable, "-m", "headflow", "oracle", "serve"] + common)
    code = main(["oracle", "verify"] + common + ["--cmd", serve, "--n", "100", "--out-dir", str(d / "v")])
    data = json.loads((d / "v" / "verify.json").read_text())
    ok = code == 0 and data["n_match"] == 100
    record(10, ok, f"{data['n_match']}/100 identical values over NDJSON")
    assert ok


def test_c11_determinism(cli_files, record):
    d, common = cli_files
    small = ["--sampling.n_samples", "500"]
    heads = str(d / "h" / "attribution.json")
    commands = {
        "h": ["attribute", "heads"] + common + small,
        "e": ["eval", "curves"] + common + ["--heads", heads],
        "k": ["tokens"] + common + small + ["--heads", heads],
        "s": ["eval", "sweep"] + common + small + ["--heads", heads],
    }
    same = total = 0
    for name, argv in commands.items():
        out = d / name
        assert main(argv + ["--out-dir", str(out)]) == 0
        first = {f.name: f.read_bytes() for f in out.iterdir()}
        assert main(["rerun", str(out / "manifest.json")]) == 0
        for f in out.iterdir():
            total += 1
            same += f.read_bytes() == first[f.name]
    ok = same == total
    record(11, ok, f"{same}/{total} artifact files byte-identical after rerun")
    assert ok


def test_c12_sweep_sanity(record):
    mono = stable = 0
    n_models = 5
    for seed in range(n_models):
        b = make_bundle(EXCLUSIVE, seed, random_wiring(seed), signal_tokens=(seed % 16,))
        res = attribute(b.oracle, SamplingSpec(16, n_samples=M_TRIAL, seed=seed), anchors=b.anchors)
        table = sweep(b.oracle, {"attribution": coefficient_ranking(res)}, FAITH_GRID, (0.2,),
                      ablate_fractions=(0.5, 0.625, 0.75, 0.875),
                      spec=SamplingSpec(16, n_samples=M_TRIAL, seed=seed), anchors=b.anchors)
        ks = [table.lookup("attribution", FAITHFULNESS_ABOVE, t) for t in FAITH_GRID]
        ks = [np.inf if k is None else k for k in ks]
        mono += all(a <= c for a, c in zip(ks, ks[1:]))
        tops = [set(r[:3]) for r in table.fraction_rankings.values()]
        stable += all(t == set(b.wired) for t in tops)
    ok = mono == n_models and stable == n_models
    record(12, ok, f"monotone min-heads {mono}/{n_models}; top-|S| stable over p in "
                   f"{{0.5,0.625,0.75,0.875}} {stable}/{n_models}")
    assert ok
