import numpy as np
import pytest

from persona_forge import analysis, mixture
from persona_forge.analysis import (center_report, divisive_overlap,
                                    dominance_check, layered_fit,
                                    migration_matrix, stability_check,
                                    worker_cap)


def test_worker_cap_env(monkeypatch):
    monkeypatch.delenv("PERSONA_FORGE_THREADS", raising=False)
    assert worker_cap() == 1
    monkeypatch.setenv("PERSONA_FORGE_THREADS", "4")
    assert worker_cap() == 4
    monkeypatch.setenv("PERSONA_FORGE_THREADS", "0")
    assert worker_cap() == 1
    monkeypatch.setenv("PERSONA_FORGE_THREADS", "nope")
    assert worker_cap() == 1


def _blob_counts(rng, n):
    theta = np.array([[0.85, 0.1, 0.05], [0.05, 0.1, 0.85]])
    z = rng.integers(0, 2, n)
    return np.stack([rng.multinomial(40, theta[c]) for c in z])


def test_stability_passes_on_separated_data():
    rng = np.random.default_rng(0)
    X = _blob_counts(rng, 1200)
    report = stability_check(X, 2, epsilon=0.05, delta=0.10, runs=4, seed=1,
                             fit_config=mixture.EMConfig(restarts=2, seed=0))
    assert report.passed
    assert report.epsilon_observed <= 0.05
    assert report.delta_observed <= 0.10
    assert report.failed_runs == []


def test_stability_respects_thresholds():
    rng = np.random.default_rng(0)
    X = _blob_counts(rng, 1200)
    report = stability_check(X, 2, epsilon=1e-9, delta=1e-9, runs=4, seed=1,
                             fit_config=mixture.EMConfig(restarts=2, seed=0))
    assert not report.passed  # finite subsample noise exceeds a zero budget


def test_stability_needs_two_runs():
    with pytest.raises(ValueError):
        stability_check(np.ones((10, 2)), 1, 0.1, 0.1, runs=1)


def test_stability_kmeans_method():
    rng = np.random.default_rng(3)
    centers = np.array([[0.0, 0.0], [20.0, 20.0]])
    X = centers[rng.integers(0, 2, 600)] + rng.normal(0, 0.3, (600, 2))
    report = stability_check(X, 2, epsilon=0.2, delta=0.1, runs=4, seed=2,
                             method="kmeans")
    assert report.passed


def test_stability_honors_thread_cap(monkeypatch):
    monkeypatch.setenv("PERSONA_FORGE_THREADS", "2")
    rng = np.random.default_rng(5)
    X = _blob_counts(rng, 400)
    report = stability_check(X, 2, 0.1, 0.1, runs=4, seed=3,
                             fit_config=mixture.EMConfig(restarts=2, seed=0))
    assert report.runs == 4


def test_dominance_check():
    hard = np.array([0] * 70 + [1] * 25 + [2] * 5)
    rep = dominance_check(hard, kappa=0.02, k_max=6, k=3)
    assert rep.passed
    np.testing.assert_allclose(rep.shares, [0.70, 0.25, 0.05])
    assert not dominance_check(hard, kappa=0.10, k_max=6, k=3).passed
    assert not dominance_check(hard, kappa=0.02, k_max=2, k=3).passed
    # an empty cluster (share 0) fails the share floor
    assert not dominance_check(hard, kappa=0.02, k_max=6, k=4).passed


def test_migration_matrix_hand_traced():
    keys = [("a", 0), ("a", 1), ("a", 2), ("b", 0), ("b", 2), ("c", 0),
            ("c", 1)]
    labels = np.array([0, 0, 1, 1, 0, 1, 1])
    mm = migration_matrix(keys, labels, 2, "TF")
    # transitions: a 0->0, a 0->1, c 1->1; b months 0 and 2 are not consecutive
    assert mm.support.tolist() == [[1, 1], [0, 1]]
    np.testing.assert_allclose(mm.matrix, [[0.5, 0.5], [0.0, 1.0]])
    assert mm.characterization == "TF"


def test_migration_matrix_unsupported_row_is_zero():
    mm = migration_matrix([("a", 0), ("a", 1)], np.array([0, 0]), 3)
    np.testing.assert_allclose(mm.matrix[1], 0.0)
    np.testing.assert_allclose(mm.matrix[2], 0.0)


def test_divisive_overlap_hand_traced():
    parent = np.array([0, 0, 0, 0, 1, 1])
    child = np.array([0, 0, 1, 1, 2, 3])
    ov = divisive_overlap(parent, child, 2, 4)
    np.testing.assert_allclose(ov[0], [0.5, 0.5, 0.0, 0.0])
    np.testing.assert_allclose(ov[1], [0.0, 0.0, 0.5, 0.5])
    np.testing.assert_allclose(ov.sum(axis=1), 1.0)


def test_divisive_overlap_shape_mismatch():
    with pytest.raises(ValueError):
        divisive_overlap(np.zeros(3), np.zeros(4), 1, 1)


def test_layered_fit_skips_tiny_parents():
    rng = np.random.default_rng(1)
    theta = np.array([[0.8, 0.1, 0.1], [0.1, 0.1, 0.8]])
    X = np.stack([rng.multinomial(30, theta[rng.integers(0, 2)])
                  for _ in range(100)])
    parents = np.zeros(100, dtype=int)
    parents[:1] = 7  # parent 7 has a single row, fewer than K=2
    report = layered_fit(X, parents, 2, mixture.EMConfig(restarts=2, seed=0))
    assert report.skipped == [7]
    assert set(report.models) == {0}
    assert report.divergence == 0.0  # a single fitted parent cannot diverge


def test_layered_fit_detects_shared_structure():
    rng = np.random.default_rng(2)
    theta = np.array([[0.8, 0.1, 0.1], [0.1, 0.1, 0.8]])
    z = rng.integers(0, 2, 4000)
    X = np.stack([rng.multinomial(40, theta[c]) for c in z])
    parents = rng.integers(0, 2, 4000)  # independent of the inner labels
    report = layered_fit(X, parents, 2, mixture.EMConfig(restarts=3, seed=1))
    assert report.divergence < 0.1


def test_center_report_layout():
    centers = np.array([[0.5, 0.5], [0.25, 0.75]])
    rows = center_report(centers, ("a", "b"))
    assert rows[0] == ["cluster", "a", "b"]
    assert rows[1] == [0, 50.0, 50.0]
    assert rows[2] == [1, 25.0, 75.0]
    rows = center_report(centers, ("a", "b"), as_percent=False)
    assert rows[1] == [0, 0.5, 0.5]
