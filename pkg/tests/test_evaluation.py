import csv

import numpy as np
import pytest

from headflow.attribution import SamplingSpec
from headflow.errors import ConfigError, InputError
from headflow.evaluation import (
    COMPLETENESS_BELOW,
    FAITHFULNESS_ABOVE,
    attention_ranking,
    causal_ranking,
    cosine_matrix,
    curves,
    head_similarity_and_cluster,
    head_vectors,
    min_components,
    prefix_masks,
    random_ranking,
    single_ablation_effects,
    sweep,
    write_curves_csv,
)
from headflow.oracle import LinearOracle
from helpers import make_bundle


def test_prefix_masks():
    m = prefix_masks([2, 0, 1], 3)
    assert m.astype(int).tolist() == [[0, 0, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1]]


def test_curves_on_linear():
    theta = np.array([0.1, 0.6, 0.3])
    lin = LinearOracle(theta, bias=2.0)
    pair = curves(lin, [1, 2, 0])
    assert np.allclose(pair.faithfulness, [0, 0.6, 0.9, 1.0])
    assert np.allclose(pair.completeness, [1.0, 0.4, 0.1, 0.0])
    assert pair.faithfulness[0] == 0.0 and pair.faithfulness[-1] == 1.0
    with pytest.raises(ConfigError):
        curves(lin, [0, 0, 1])


def test_min_components_examples():
    f = [0.0, 0.3, 0.8, 0.95, 1.0]
    assert min_components(f, FAITHFULNESS_ABOVE, 0.8) == 3  # strict
    assert min_components(f, FAITHFULNESS_ABOVE, 0.5) == 2
    c = [1.0, 0.6, 0.2, 0.05, 0.0]
    assert min_components(c, COMPLETENESS_BELOW, 0.2) == 3
    assert min_components([0.0, 0.5, 0.7], FAITHFULNESS_ABOVE, 0.9) is None
    with pytest.raises(ConfigError):
        min_components(f, "bogus", 0.5)
    with pytest.raises(ConfigError):
        min_components(f, FAITHFULNESS_ABOVE, 1.0)


def test_causal_ranking_linear():
    lin = LinearOracle([0.25, 0.5, 0.125, 0.125])
    assert np.allclose(single_ablation_effects(lin), [0.25, 0.5, 0.125, 0.125])
    assert causal_ranking(lin) == [1, 0, 2, 3]


def test_causal_ranking_copy_heads():
    b = make_bundle(seed=1, wired_heads=((0, 1), (1, 2), (2, 3)))
    effects = single_ablation_effects(b.oracle, b.anchors)
    assert sorted(causal_ranking(b.oracle, b.anchors)[:3]) == sorted(b.wired)
    others = np.delete(effects, b.wired)
    assert np.all(np.abs(others) < 0.01)


def test_attention_ranking_from_weights():
    assert attention_ranking([0.1, 0.9, 0.5]) == [1, 2, 0]
    with pytest.raises(ConfigError):
        attention_ranking(type("T", (), {"attention": np.zeros(1)})())


def test_random_rankings_distinct():
    seen = {tuple(random_ranking(64, s)) for s in range(100)}
    assert len(seen) == 100
    assert random_ranking(16, 3) == random_ranking(16, 3)
    assert sorted(random_ranking(16, 3)) == list(range(16))


def test_sweep_single_cell_matches_curves():
    lin = LinearOracle([0.1, 0.6, 0.3])
    table = sweep(lin, {"r": [1, 2, 0]}, faith_thresholds=(0.8,), comp_thresholds=(0.2,))
    assert table.lookup("r", FAITHFULNESS_ABOVE, 0.8) == 2
    assert table.lookup("r", COMPLETENESS_BELOW, 0.2) == 2
    with pytest.raises(KeyError):
        table.lookup("r", FAITHFULNESS_ABOVE, 0.5)


def test_sweep_fractions():
    theta = np.zeros(8)
    theta[[1, 4]] = [0.7, 0.3]
    lin = LinearOracle(theta)
    table = sweep(lin, {}, (0.9,), (0.1,), ablate_fractions=(0.5, 0.75),
                  spec=SamplingSpec(8, n_samples=200, seed=0))
    assert set(table.fraction_rankings) == {0.5, 0.75}
    for frac in (0.5, 0.75):
        assert table.fraction_rankings[frac][:2] == [1, 4]
        assert table.lookup(f"attribution@p={frac:g}", FAITHFULNESS_ABOVE, 0.9) == 2
    with pytest.raises(ConfigError):
        sweep(lin, {}, ablate_fractions=(0.5,))


def test_head_vectors_shape():
    assert head_vectors([[1, 2, 3], [4, 5, 6]]).tolist() == [[1, 4], [2, 5], [3, 6]]
    with pytest.raises(InputError):
        head_vectors([[1, 2], [3]])


def test_cosine_examples():
    cos, zero = cosine_matrix(np.array([[1.0, 0], [2.0, 0], [0, 3.0], [0, 0]]))
    assert np.allclose(cos[0, 1], 1.0) and np.allclose(cos[0, 2], 0.0)
    assert zero == [3] and cos[3, 3] == 1.0 and np.all(cos[3, :3] == 0)
    assert np.array_equal(cos, cos.T)


def test_planted_clusters():
    rng = np.random.default_rng(0)
    centers = np.eye(3) * 5
    v = np.concatenate([c + 0.1 * rng.standard_normal((5, 3)) for c in centers])
    perm = rng.permutation(15)
    cl = head_similarity_and_cluster(v[perm], 3)
    truth = np.repeat(np.arange(3), 5)[perm]
    for a in range(15):
        for b in range(15):
            assert (cl.labels[a] == cl.labels[b]) == (truth[a] == truth[b])
    assert cl.labels[0] == 0
    assert sorted(cl.order) == list(range(15))


def test_identical_vectors_one_cluster():
    cl = head_similarity_and_cluster(np.tile([1.0, 2.0], (4, 1)), 1)
    assert cl.labels == [0, 0, 0, 0]
    assert np.allclose(cl.cosine, 1.0)


def test_cluster_errors():
    with pytest.raises(InputError):
        head_similarity_and_cluster(np.ones((1, 3)), 1)
    with pytest.raises(InputError):
        head_similarity_and_cluster(np.array([[1.0, np.nan], [0, 1]]), 1)
    with pytest.raises(ConfigError):
        head_similarity_and_cluster(np.eye(3), 4)


def test_curves_csv(tmp_path):
    pair = curves(LinearOracle([0.5, 0.5]), [0, 1], name="x")
    write_curves_csv(tmp_path / "c.csv", [pair])
    rows = list(csv.reader(open(tmp_path / "c.csv", newline="")))
    assert rows[0] == ["k", "faithfulness", "completeness", "ranking_name"]
    assert len(rows) == 4 and rows[2][3] == "x"
