import numpy as np
import pytest

from headflow.attribution import ENParams, SamplingSpec, attribute, normalize_pi
from headflow.errors import ConfigError, InputError, NormalizationError, NotAchievableError
from headflow.intervention import compute_baseline_kv
from headflow.model import forward
from headflow.oracle import LinearOracle, ModelOracle
from headflow.tokenflow import (
    image_token_attribution,
    select_core_heads,
    text_token_effects,
    theta_attention_correlation,
    to_grid,
    weighted_attention_map,
)
from helpers import make_bundle


def test_core_heads_linear():
    lin = LinearOracle([0.5, 0.4, 0.1])
    core = select_core_heads(lin, [0, 1, 2], threshold=0.8)
    assert core.x_star.tolist() == [True, True, False]
    assert core.k == 2 and core.achieved_faithfulness == pytest.approx(0.9)
    assert core.to_dict()["heads"] == [0, 1]


def test_core_heads_from_result():
    lin = LinearOracle([0.1, 0.4, 0.5])
    res = attribute(lin, SamplingSpec(3, ablate_fraction=0.5, n_samples=40), ENParams(alpha=1e-9))
    assert select_core_heads(lin, res).to_dict()["heads"] == [1, 2]


def test_core_heads_not_achievable():
    lin = LinearOracle([0.5, 0.5])
    with pytest.raises(NotAchievableError):
        select_core_heads(lin, [0, 1], threshold=0.8, anchors=(0.0, 2.0))
    with pytest.raises(ConfigError):
        select_core_heads(lin, [0, 1], threshold=1.0)


def test_text_effects_linear():
    lin = LinearOracle([1.0, 1.0], theta_text=[0.0, 0.5, 0.02], n_text=3)
    rep = text_token_effects(lin, [1, 1], threshold=0.05)
    # pi(x*) normalizes to 1; dropping token i removes theta_text[i] / 2
    assert np.allclose(rep.delta_pi, [0.0, 0.25, 0.01])
    assert rep.important.tolist() == [False, True, False]
    assert rep.retained_ratio == pytest.approx(1 - 0.01)


def test_text_effects_undefined():
    lin = LinearOracle([1.0, 1.0])
    with pytest.raises(NormalizationError):
        text_token_effects(lin, [0, 0])


def test_self_calibration_gives_zero_effects():
    b = make_bundle(seed=0, n_calibration=20)
    base = compute_baseline_kv(b.config, b.model.weights, [b.seq])
    o = ModelOracle(b.config, b.model.weights, b.seq, base)
    x = np.ones(b.config.n_components, bool)
    x[b.wired[0]] = False
    rep = text_token_effects(o, x, anchors=(0.0, 1.0))
    assert np.all(rep.delta_pi == 0.0)


def test_receive_positions_detected():
    b = make_bundle(seed=3, receive=(2, 7))
    x = np.zeros(b.config.n_components, bool)
    x[b.wired] = True
    rep = text_token_effects(b.oracle, x, anchors=b.anchors)
    assert np.flatnonzero(rep.important).tolist() == [7]
    assert rep.retained_ratio > 0.95


def test_redundant_signal_tokens():
    b = make_bundle(seed=4, signal_tokens=(3, 12))
    x = np.zeros(b.config.n_components, bool)
    x[b.wired] = True
    img = image_token_attribution(b.oracle, x, None, SamplingSpec(16, ablate_fraction=0.5, n_samples=1000),
                                  ENParams(alpha=1e-6))
    top = sorted(np.argsort(-img.theta)[:2].tolist())
    assert top == [3, 12]
    o = b.oracle
    for j in (3, 12):
        v = np.ones(16, bool)
        v[j] = False
        assert normalize_pi(o.evaluate(o.query(x, None, v)), img.anchors) > 0.5
    assert img.grid.shape == (4, 4)


def test_grid_reshape():
    g = to_grid(np.arange(16))
    assert g[1, 2] == 6
    with pytest.raises(InputError):
        to_grid(np.arange(15))


def test_weighted_map_matches_loops():
    b = make_bundle(seed=5, n_calibration=10)
    _, trace = forward(b.config, b.model.weights, b.seq, want_trace=True)
    rng = np.random.default_rng(0)
    N, Pt, P = b.config.n_components, b.seq.n_text, b.config.n_image
    theta, x = rng.standard_normal(N), rng.random(N) < 0.5
    dpi, u = rng.standard_normal(Pt), rng.random(Pt) < 0.5
    got = weighted_attention_map(trace, theta, x, dpi, u, P)
    H = b.config.n_heads
    want = np.zeros(P)
    for n in range(N):
        for i in range(Pt):
            for j in range(P):
                want[j] += x[n] * theta[n] * u[i] * dpi[i] * trace.attention[n // H, n % H, P + i, j]
    assert np.allclose(got, want, atol=1e-12)
    with pytest.raises(InputError):
        weighted_attention_map(trace, theta[:3], x, dpi, u, P)


def test_theta_attention_correlation():
    w = np.array([0.0, 1.0, 2.0, 3.0])
    assert theta_attention_correlation(w, 2 * w + 1) == pytest.approx(1.0)
