import math

import numpy as np
import pytest

from marginals.sphere import (SolverConfig, best_index, normalize_rows, random_directions,
                              sphere_ascent, sphere_net)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(starts=4)
    with pytest.raises(ValueError):
        SolverConfig(net_mesh=0.6)
    assert SolverConfig.sweep_preset(starts=9).starts == 9


def test_ascent_finds_top_eigenvector():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((6, 6))
    M = M @ M.T
    fun = lambda X: (np.einsum("ij,jk,ik->i", X, M, X), 2 * X @ M)
    X0 = random_directions(rng, 5, 6)
    X, vals, stats = sphere_ascent(fun, X0, SolverConfig())
    w = np.linalg.eigvalsh(M)[-1]
    assert vals.max() == pytest.approx(w, rel=1e-8)
    assert np.allclose(np.linalg.norm(X, axis=1), 1.0)
    assert stats.starts == 5 and len(stats.trace) == 5


def test_ascent_is_monotone():
    a = np.array([1.0, 2.0, 3.0])
    fun = lambda X: (X @ a, np.tile(a, (len(X), 1)))
    X0 = np.eye(3)
    v0, _ = fun(X0)
    _, vals, _ = sphere_ascent(fun, X0, SolverConfig(max_iters=3))
    assert np.all(vals >= v0)


def test_best_index_tie_break():
    X = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
    assert best_index(np.array([1.0, 1.0, 0.5]), X) == 1
    assert best_index(np.array([0.0, 2.0, 1.0]), X) == 1


@pytest.mark.parametrize("n,mesh", [(2, 0.01), (3, 0.1), (4, 0.2)])
def test_net_covers_sphere(n, mesh):
    P, actual = sphere_net(n, mesh)
    assert actual <= mesh + 1e-12
    assert np.allclose(np.linalg.norm(P, axis=1), 1.0)
    Y = random_directions(np.random.default_rng(1), 2000, n)
    # distance to the net up to sign
    d = np.sqrt(np.maximum(0.0, 2 - 2 * np.abs(Y @ P.T).max(axis=1)))
    assert d.max() <= actual + 1e-9


def test_net_coarsens_when_capped():
    P, actual = sphere_net(4, 0.01, max_points=5000)
    assert len(P) <= 5000 and actual > 0.01
    P1, m1 = sphere_net(1, 0.1)
    assert P1.shape == (1, 1) and m1 == 0.0


def test_normalize_rows_drops_zero_rows():
    R = normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0]]))
    assert R.shape == (1, 2) and np.allclose(R, [[0.6, 0.8]])
