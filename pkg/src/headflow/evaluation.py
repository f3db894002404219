"""Faithfulness / completeness curves, min-head counts, baseline rankings,
sweeps and head-vector clustering."""
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.hierarchy import fcluster, leaves_list, linkage
from scipy.spatial.distance import squareform

from headflow.artifacts import write_csv
from headflow.attribution import attribute, coefficient_ranking, normalize_pi
from headflow.errors import ConfigError, InputError
from headflow.model import image_attention_per_head

FAITHFULNESS_ABOVE = "faithfulness_above"
COMPLETENESS_BELOW = "completeness_below"
FAITH_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
COMP_GRID = (0.5, 0.4, 0.3, 0.2, 0.1)
FRACTION_GRID = (0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875)
LINKAGE = "average"


def _check_permutation(ranking, n):
    r = [int(i) for i in ranking]
    if sorted(r) != list(range(n)):
        raise ConfigError(f"ranking is not a permutation of 0..{n - 1}")
    return r


@dataclass
class CurvePair:
    ranking: list
    faithfulness: np.ndarray
    completeness: np.ndarray
    name: str = ""

    def rows(self):
        for k, (f, c) in enumerate(zip(self.faithfulness, self.completeness)):
            yield k, f, c, self.name


def prefix_masks(ranking, n):
    """Row k activates the first k entries of ``ranking``; k = 0..n."""
    masks = np.zeros((n + 1, n), dtype=bool)
    for k in range(1, n + 1):
        masks[k] = masks[k - 1]
        masks[k, ranking[k - 1]] = True
    return masks


def curves(oracle, ranking, anchors=None, name=""):
    """pi of the top-k mask (faithfulness) and of its complement (completeness)."""
    n = oracle.n_heads
    ranking = _check_permutation(ranking, n)
    anchors = oracle.anchors() if anchors is None else anchors
    masks = prefix_masks(ranking, n)
    raw = oracle.evaluate_batch([oracle.query(m) for m in masks] + [oracle.query(~m) for m in masks])
    pi = normalize_pi(raw, anchors)
    return CurvePair(ranking, pi[:n + 1], pi[n + 1:], name)


def min_components(curve, mode, threshold):
    """Smallest k meeting the criterion, or None."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold {threshold} outside (0, 1)")
    curve = np.asarray(curve, dtype=np.float64)
    if mode == FAITHFULNESS_ABOVE:
        hit = np.flatnonzero(curve > threshold)
    elif mode == COMPLETENESS_BELOW:
        hit = np.flatnonzero(curve < threshold)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return int(hit[0]) if hit.size else None


def single_ablation_effects(oracle, anchors=None):
    """Delta pi_n = 1 - pi(all intact except n), for every component n."""
    n = oracle.n_heads
    anchors = oracle.anchors() if anchors is None else anchors
    masks = ~np.eye(n, dtype=bool)
    raw = oracle.evaluate_batch([oracle.query(m) for m in masks])
    return 1.0 - normalize_pi(raw, anchors)


def causal_ranking(oracle, anchors=None):
    return coefficient_ranking(single_ablation_effects(oracle, anchors))


def attention_ranking(trace_or_weights, n_image=None):
    """Rank heads by mean image attention of the text queries.

    Accepts a clean-forward trace (with ``n_image``) or the per-head weights.
    """
    if hasattr(trace_or_weights, "attention"):
        if n_image is None:
            raise ConfigError("n_image is needed to read a trace")
        weights = image_attention_per_head(trace_or_weights, n_image)
    else:
        weights = np.asarray(trace_or_weights, dtype=np.float64)
    return coefficient_ranking(weights)


def random_ranking(n, seed):
    return [int(i) for i in np.random.default_rng(seed).permutation(n)]


@dataclass
class SweepTable:
    rows: list = field(default_factory=list)  # (ranking, criterion, threshold, k)
    fraction_rankings: dict = field(default_factory=dict)
    fraction_results: dict = field(default_factory=dict)

    def lookup(self, ranking, criterion, threshold):
        for r, c, t, k in self.rows:
            if r == ranking and c == criterion and t == threshold:
                return k
        raise KeyError((ranking, criterion, threshold))


def _min_rows(name, pair, faith_thresholds, comp_thresholds):
    rows = []
    for t in faith_thresholds:
        rows.append((name, FAITHFULNESS_ABOVE, t, min_components(pair.faithfulness, FAITHFULNESS_ABOVE, t)))
    for t in comp_thresholds:
        rows.append((name, COMPLETENESS_BELOW, t, min_components(pair.completeness, COMPLETENESS_BELOW, t)))
    return rows


def sweep(oracle, rankings, faith_thresholds=FAITH_GRID, comp_thresholds=COMP_GRID,
          ablate_fractions=(), spec=None, en=None, anchors=None):
    """min-head counts per (ranking, threshold), plus one re-attribution per fraction.

    ``rankings`` maps names to fixed rankings. For every fraction in
    ``ablate_fractions`` the heads are re-attributed with ``spec`` at that
    fraction and the resulting ranking is swept under the name
    ``attribution@p=<fraction>``.
    """
    anchors = oracle.anchors() if anchors is None else anchors
    table = SweepTable()
    for name in rankings:
        pair = curves(oracle, rankings[name], anchors, name)
        table.rows.extend(_min_rows(name, pair, faith_thresholds, comp_thresholds))
    if ablate_fractions:
        if spec is None:
            raise ConfigError("fraction sweep needs a sampling spec")
        for frac in ablate_fractions:
            result = attribute(oracle, replace(spec, ablate_fraction=float(frac)), en, anchors=anchors)
            name = f"attribution@p={frac:g}"
            ranking = coefficient_ranking(result)
            table.fraction_rankings[float(frac)] = ranking
            table.fraction_results[float(frac)] = result
            pair = curves(oracle, ranking, anchors, name)
            table.rows.extend(_min_rows(name, pair, faith_thresholds, comp_thresholds))
    return table


# --------------------------------------------------------------------------
# head vectors


def head_vectors(thetas):
    """Stack per-sample coefficient vectors into per-head rows (N, n_samples)."""
    rows = [np.asarray(t, dtype=np.float64).ravel() for t in thetas]
    if not rows or len({r.size for r in rows}) != 1:
        raise InputError("coefficient vectors must share one length")
    mat = np.stack(rows)
    if mat.ndim != 2:
        raise InputError("coefficient vectors must share one length")
    return mat.T.copy()


@dataclass
class Clustering:
    cosine: np.ndarray
    labels: list
    order: list
    zero_norm: list
    method: str = LINKAGE


def cosine_matrix(vectors):
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.sqrt((v * v).sum(axis=1))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    u = v / safe[:, None]
    cos = np.clip(u @ u.T, -1.0, 1.0)
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    cos = 0.5 * (cos + cos.T)
    np.fill_diagonal(cos, 1.0)
    return cos, [int(i) for i in np.flatnonzero(zero)]


def head_similarity_and_cluster(vectors, n_clusters):
    """Cosine similarity, average-linkage clusters on ``1 - cosine``, leaf order.

    Zero-norm rows get similarity 0 to everything else and are reported in
    ``zero_norm``. Cluster labels are renumbered 0.. in order of first
    appearance.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise InputError("need at least two head vectors")
    if not np.all(np.isfinite(v)):
        raise InputError("head vectors contain non-finite values")
    if not 1 <= n_clusters <= v.shape[0]:
        raise ConfigError(f"n_clusters must be in 1..{v.shape[0]}")
    cos, zero = cosine_matrix(v)
    dist = np.clip(1.0 - cos, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    Z = linkage(squareform(dist, checks=False), method=LINKAGE)
    raw = fcluster(Z, t=n_clusters, criterion="maxclust")
    relabel = {}
    labels = [relabel.setdefault(int(c), len(relabel)) for c in raw]
    return Clustering(cos, labels, [int(i) for i in leaves_list(Z)], zero)


# --------------------------------------------------------------------------
# exports


def write_curves_csv(path, pairs):
    rows = [row for pair in pairs for row in pair.rows()]
    return write_csv(path, ["k", "faithfulness", "completeness", "ranking_name"], rows)


def write_minheads_csv(path, rows):
    return write_csv(path, ["ranking", "criterion", "threshold", "k"], rows)


def write_headsim_csv(path, cos):
    n = cos.shape[0]
    rows = [(i, j, cos[i, j]) for i in range(n) for j in range(n)]
    return write_csv(path, ["i", "j", "cosine"], rows)


def theta_attention_pairs(theta, attention_weights):
    """(head, theta_n, image attention weight) triples for scatter plots."""
    theta = np.asarray(theta, dtype=np.float64)
    att = np.asarray(attention_weights, dtype=np.float64)
    if theta.shape != att.shape:
        raise InputError("theta and attention weights differ in length")
    return [(n, float(theta[n]), float(att[n])) for n in range(theta.size)]
