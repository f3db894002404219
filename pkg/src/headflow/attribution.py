"""Subset-sampled linear attribution.

Sample binary intactness masks, evaluate the oracle on each, map raw logits
through the affine anchor normalization, and fit an elastic net from mask to
normalized value. Works over attention heads or, with the heads fixed to a
core set, over image tokens.

With exact-count sampling every mask has the same number of ones, so the
design cannot separate a common shift of all coefficients from the
intercept. The penalty picks that shift; for sparse contributions it picks
zero. ``scheme="bernoulli"`` removes the ambiguity.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from headflow.errors import ConfigError, NormalizationError
from headflow.numerics import RegressionFit, elastic_net_fit, fit_metrics

HEADS = "heads"
IMAGE_TOKENS = "image_tokens"
SCHEMES = ("exact", "bernoulli")


def round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SamplingSpec:
    n_components: int
    ablate_fraction: float = 0.75
    n_samples: int = 10_000
    train_fraction: float = 0.8
    seed: int = 0
    scheme: str = "exact"

    def __post_init__(self):
        if self.n_components < 2:
            raise ConfigError("need at least two components")
        if not 0.0 < self.ablate_fraction < 1.0:
            raise ConfigError(f"ablate_fraction {self.ablate_fraction} outside (0, 1)")
        if not 1 <= self.n_ablate <= self.n_components - 1:
            raise ConfigError(
                f"round(p*N) = {self.n_ablate} must lie in 1..{self.n_components - 1}"
            )
        if self.n_samples < 10:
            raise ConfigError("n_samples must be at least 10")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction {self.train_fraction} outside (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")

    @property
    def n_ablate(self):
        return round_half_up(self.ablate_fraction * self.n_components)

    @property
    def n_intact(self):
        return self.n_components - self.n_ablate

    @property
    def n_train(self):
        n = round_half_up(self.train_fraction * self.n_samples)
        return min(max(n, 2), self.n_samples - 2)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ENParams:
    alpha: float = 0.0005
    l1_ratio: float = 0.5
    max_iter: int = 1000
    tol: float = 1e-6

    def to_dict(self):
        return asdict(self)


def _streams(seed):
    mask_ss, split_ss = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(mask_ss), np.random.default_rng(split_ss)


def sample_masks(spec):
    """(M, N) bool masks, 1 = intact. A pure function of ``spec``."""
    rng, _ = _streams(spec.seed)
    M, N = spec.n_samples, spec.n_components
    if spec.scheme == "bernoulli":
        return rng.random((M, N)) >= spec.ablate_fraction
    order = np.argsort(rng.random((M, N)), axis=1, kind="stable")
    masks = np.zeros((M, N), dtype=bool)
    np.put_along_axis(masks, order[:, :spec.n_intact], True, axis=1)
    return masks


def split_indices(spec):
    _, rng = _streams(spec.seed)
    perm = rng.permutation(spec.n_samples)
    return perm[:spec.n_train], perm[spec.n_train:]


def exhaustive_masks(n):
    """All ``2**n`` masks, row ``r`` holding the bits of ``r`` (component 0 = LSB)."""
    if not 1 <= n <= 24:
        raise ConfigError(f"exhaustive enumeration over {n} components refused")
    r = np.arange(2 ** n, dtype=np.int64)[:, None]
    return ((r >> np.arange(n)) & 1).astype(bool)


def check_anchors(raw_zero, raw_one):
    if not (math.isfinite(raw_zero) and math.isfinite(raw_one)):
        raise NormalizationError(f"non-finite anchors ({raw_zero}, {raw_one})")
    if raw_one == raw_zero:
        raise NormalizationError(f"anchors coincide at {raw_zero}")


def normalize_pi(raw, anchors):
    """Affine map sending ``raw_zero`` to 0 and ``raw_one`` to 1. Not clamped."""
    raw_zero, raw_one = anchors
    check_anchors(raw_zero, raw_one)
    return (np.asarray(raw, dtype=np.float64) - raw_zero) / (raw_one - raw_zero)


@dataclass
class AttributionResult:
    target: str
    fit: RegressionFit
    anchors: tuple
    spec: SamplingSpec
    en: ENParams
    masks: Optional[np.ndarray] = field(default=None, repr=False)
    values: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def theta(self):
        return self.fit.theta

    def to_dict(self):
        f = self.fit
        return {
            "target": self.target,
            "theta": [float(t) for t in f.theta],
            "intercept": float(f.intercept),
            "train_r2": float(f.train_r2),
            "test_r2": float(f.test_r2),
            "test_pearson": float(f.test_pearson),
            "converged": bool(f.converged),
            "n_iter": int(f.n_iter),
            "anchors": {"raw_zero": float(self.anchors[0]), "raw_one": float(self.anchors[1])},
            "spec": self.spec.to_dict(),
            "en": self.en.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        fit = RegressionFit(
            theta=np.asarray(d["theta"], dtype=np.float64),
            intercept=float(d["intercept"]),
            train_r2=d["train_r2"],
            test_r2=d["test_r2"],
            test_pearson=d["test_pearson"],
            converged=d.get("converged", True),
            n_iter=d.get("n_iter", 0),
        )
        anchors = (d["anchors"]["raw_zero"], d["anchors"]["raw_one"])
        return cls(d["target"], fit, anchors, SamplingSpec(**d["spec"]), ENParams(**d["en"]))


def fit_dataset(masks, values, train_idx, test_idx, en):
    """Elastic net on the train rows; metrics on both splits."""
    X = np.asarray(masks, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    fit = elastic_net_fit(X[train_idx], y[train_idx], en.alpha, en.l1_ratio, en.max_iter, en.tol)
    fit.train_r2, _ = fit_metrics(y[train_idx], fit.predict(X[train_idx]))
    fit.test_r2, fit.test_pearson = fit_metrics(y[test_idx], fit.predict(X[test_idx]))
    return fit


def _bits(mask, n, name):
    arr = np.asarray(mask).astype(bool)
    if arr.shape != (n,):
        raise ConfigError(f"{name} must have length {n}")
    return arr


def attribution_anchors(oracle, target=HEADS, x_star=None, u_star=None):
    """Anchors of the normalization used for ``target``.

    Heads: raw values of the all-ablated and all-intact head masks.
    Image tokens: the all-ablated value and the value with only ``x_star`` /
    ``u_star`` intact and every image token kept, so the denominator is the
    core-set value.
    """
    raw_zero, raw_one = oracle.anchors()
    if target == IMAGE_TOKENS:
        x = _bits(x_star, oracle.n_heads, "x_star")
        u = np.ones(oracle.n_text, bool) if u_star is None else _bits(u_star, oracle.n_text, "u_star")
        raw_one = oracle.evaluate(oracle.query(x, u, None))
        if not raw_one > raw_zero:
            raise NormalizationError(
                "core set does not raise the target logit above the all-ablated level; "
                "image-token normalization is undefined"
            )
    check_anchors(raw_zero, raw_one)
    return raw_zero, raw_one


def attribute(oracle, spec, en=None, target=HEADS, x_star=None, u_star=None, anchors=None):
    """Fit per-component contributions for ``target`` ("heads" or "image_tokens")."""
    en = en or ENParams()
    if target == HEADS:
        n = oracle.n_heads
    elif target == IMAGE_TOKENS:
        n = oracle.n_image
        if x_star is None:
            raise ConfigError("image-token attribution needs a core head set")
    else:
        raise ConfigError(f"unknown target {target!r}")
    if spec.n_components != n:
        raise ConfigError(f"spec has {spec.n_components} components, oracle has {n}")
    if anchors is None:
        anchors = attribution_anchors(oracle, target, x_star, u_star)
    check_anchors(*anchors)

    masks = sample_masks(spec)
    if target == HEADS:
        queries = [oracle.query(m) for m in masks]
    else:
        x = _bits(x_star, oracle.n_heads, "x_star")
        u = None if u_star is None else _bits(u_star, oracle.n_text, "u_star")
        queries = [oracle.query(x, u, m) for m in masks]
    raw = np.asarray(oracle.evaluate_batch(queries), dtype=np.float64)
    values = normalize_pi(raw, anchors)
    train_idx, test_idx = split_indices(spec)
    fit = fit_dataset(masks, values, train_idx, test_idx, en)
    return AttributionResult(target, fit, tuple(float(a) for a in anchors), spec, en, masks, values)


def coefficient_ranking(result_or_theta):
    """Indices by descending coefficient; ties keep the lower index first."""
    theta = getattr(result_or_theta, "theta", result_or_theta)
    theta = np.asarray(theta, dtype=np.float64)
    return [int(i) for i in np.argsort(-theta, kind="stable")]
