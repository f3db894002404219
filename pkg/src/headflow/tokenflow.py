"""Token-level tracing inside a core head set.

Pick the smallest attribution-ranked prefix of heads that keeps
faithfulness above a threshold, then ask which text positions need image
information (block one at a time) and which image tokens carry it
(attribution over image-token masks with the core-set normalization).
"""
from dataclasses import dataclass

import numpy as np

from headflow.artifacts import write_csv
from headflow.attribution import IMAGE_TOKENS, attribute, attribution_anchors, coefficient_ranking, normalize_pi
from headflow.errors import ConfigError, InputError, NormalizationError, NotAchievableError
from headflow.evaluation import prefix_masks
from headflow.numerics import fit_metrics

TOKEN_THRESHOLD = 0.05
FAITH_THRESHOLD = 0.8


@dataclass
class CoreHeadSet:
    x_star: np.ndarray
    achieved_faithfulness: float
    source_ranking: str
    k: int

    def to_dict(self):
        return {
            "x_star": [int(b) for b in self.x_star],
            "heads": [int(i) for i in np.flatnonzero(self.x_star)],
            "achieved_faithfulness": float(self.achieved_faithfulness),
            "source_ranking": self.source_ranking,
            "k": int(self.k),
        }


def select_core_heads(oracle, result_or_ranking, threshold=FAITH_THRESHOLD, anchors=None,
                      source="attribution"):
    """Shortest ranking prefix whose mask has pi strictly above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold {threshold} outside (0, 1)")
    if hasattr(result_or_ranking, "theta"):
        ranking = coefficient_ranking(result_or_ranking)
    else:
        ranking = [int(i) for i in result_or_ranking]
    n = oracle.n_heads
    anchors = oracle.anchors() if anchors is None else anchors
    masks = prefix_masks(ranking, n)[1:]
    pi = normalize_pi(oracle.evaluate_batch([oracle.query(m) for m in masks]), anchors)
    hit = np.flatnonzero(pi > threshold)
    if not hit.size:
        raise NotAchievableError(
            f"no prefix of the {source} ranking reaches faithfulness > {threshold} "
            f"(best {float(pi.max()):.4f})"
        )
    k = int(hit[0])
    return CoreHeadSet(masks[k].copy(), float(pi[k]), source, k + 1)


@dataclass
class TokenEffectReport:
    delta_pi: np.ndarray
    important: np.ndarray
    retained_ratio: float
    pi_core: float
    threshold: float

    def to_dict(self):
        return {
            "delta_pi": [float(x) for x in self.delta_pi],
            "u_star": [int(b) for b in self.important],
            "retained_ratio": float(self.retained_ratio),
            "pi_core": float(self.pi_core),
            "threshold": float(self.threshold),
        }


def text_token_effects(oracle, x_star, threshold=TOKEN_THRESHOLD, anchors=None):
    """Delta pi_i = 1 - pi(x*; u_not_i, 1) / pi(x*) for each text position."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold {threshold} outside (0, 1)")
    x = np.asarray(x_star).astype(bool)
    anchors = oracle.anchors() if anchors is None else anchors
    P = oracle.n_text
    queries = [oracle.query(x)]
    for i in range(P):
        u = np.ones(P, bool)
        u[i] = False
        queries.append(oracle.query(x, u))
    pi = normalize_pi(oracle.evaluate_batch(queries), anchors)
    pi_core = float(pi[0])
    if not pi_core > 0.0:
        raise NormalizationError(f"pi(x*) = {pi_core:.6g} is not positive; token effects undefined")
    delta = 1.0 - pi[1:] / pi_core
    u_star = delta > threshold
    if u_star.all():
        kept = pi_core
    else:
        kept = float(normalize_pi(oracle.evaluate(oracle.query(x, u_star)), anchors))
    return TokenEffectReport(delta, u_star, kept / pi_core, pi_core, threshold)


@dataclass
class ImageAttribution:
    theta: np.ndarray
    grid: np.ndarray
    result: object  # AttributionResult over image tokens
    anchors: tuple

    def to_dict(self):
        f = self.result.fit
        return {
            "theta": [float(t) for t in self.theta],
            "grid": [[float(t) for t in row] for row in self.grid],
            "intercept": float(f.intercept),
            "train_r2": float(f.train_r2),
            "test_r2": float(f.test_r2),
            "test_pearson": float(f.test_pearson),
            "anchors": {"raw_zero": float(self.anchors[0]), "raw_core": float(self.anchors[1])},
            "spec": self.result.spec.to_dict(),
            "en": self.result.en.to_dict(),
        }


def to_grid(values):
    v = np.asarray(values)
    side = int(round(np.sqrt(v.size)))
    if side * side != v.size:
        raise InputError(f"{v.size} image tokens do not form a square grid")
    return v.reshape(side, side)


def image_token_attribution(oracle, x_star, u_star, spec, en=None):
    """Attribution over image-token masks, normalized so v = 1 gives 1.

    With ``x_star`` / ``u_star`` fixed, the normalization divides by the
    core-set value, so 0 is the all-ablated model and 1 is the core set with
    every image token intact.
    """
    anchors = attribution_anchors(oracle, IMAGE_TOKENS, x_star, u_star)
    result = attribute(oracle, spec, en, IMAGE_TOKENS, x_star, u_star, anchors)
    return ImageAttribution(result.theta.copy(), to_grid(result.theta), result, anchors)


def weighted_attention_map(trace, theta, x_star, delta_pi, u_star, n_image):
    """w = sum_n x*_n theta_n sum_i u*_i dpi_i a^n_i[:P], rows i over text queries."""
    A = np.asarray(trace.attention, dtype=np.float64)
    L, H, T, _ = A.shape
    n_text = T - n_image
    parts = [np.asarray(a, dtype=np.float64) for a in (x_star, theta, u_star, delta_pi)]
    if any(a.shape != (L * H,) for a in parts[:2]) or any(a.shape != (n_text,) for a in parts[2:]):
        raise InputError("weights do not match the trace dimensions")
    head_w = parts[0] * parts[1]
    tok_w = parts[2] * parts[3]
    rows = A[:, :, n_image:, :n_image].reshape(L * H, n_text, n_image)
    return np.einsum("n,i,nij->j", head_w, tok_w, rows)


def theta_attention_correlation(map_w, image_theta):
    """Pearson correlation between the attention map and image-token coefficients."""
    return fit_metrics(np.asarray(image_theta, np.float64), np.asarray(map_w, np.float64))[1]


def write_wmap_csv(path, w):
    g = to_grid(w)
    rows = [(r, c, g[r, c]) for r in range(g.shape[0]) for c in range(g.shape[1])]
    return write_csv(path, ["row", "col", "w"], rows)
