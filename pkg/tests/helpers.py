"""Shared builders for tests."""
from dataclasses import dataclass

import numpy as np

from headflow.intervention import compute_baseline_kv
from headflow.model import ModelConfig
from headflow.oracle import CachedOracle, ModelOracle
from headflow.synthetic import EXCLUSIVE, WiringSpec, gen_calibration_pool, gen_copyhead_model, gen_tasks


@dataclass
class Bundle:
    model: object
    seq: object
    baseline: object
    oracle: object
    anchors: tuple

    @property
    def config(self):
        return self.model.config

    @property
    def wired(self):
        return self.model.wiring.head_indices(self.config.n_heads)


def make_bundle(mode=EXCLUSIVE, seed=0, wired_heads=None, signal_tokens=(5,), receive=None,
                config=None, n_calibration=100, noise=0.1):
    config = config or ModelConfig()
    kw = {"redundancy": mode, "signal_tokens": signal_tokens, "receive_positions": receive}
    if wired_heads is not None:
        kw["wired_heads"] = wired_heads
    model = gen_copyhead_model(config, WiringSpec(**kw), seed=seed)
    seq = gen_tasks(model, 1, noise, seed=seed + 1000)[0]
    pool = gen_calibration_pool(model, n_calibration, noise, seed=seed + 2000)
    baseline = compute_baseline_kv(config, model.weights, pool)
    oracle = CachedOracle(ModelOracle(config, model.weights, seq, baseline))
    return Bundle(model, seq, baseline, oracle, oracle.anchors())


def random_wiring(seed, n_wired=3, config=None):
    """Distinct wired heads drawn from a seeded stream."""
    config = config or ModelConfig()
    rng = np.random.default_rng([seed, 99])
    flat = rng.choice(config.n_components, size=n_wired, replace=False)
    return tuple((int(n) // config.n_heads, int(n) % config.n_heads) for n in sorted(flat))
