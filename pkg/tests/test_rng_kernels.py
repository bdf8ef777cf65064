import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stacklq import _numba
from stacklq.errors import NonFinite
from stacklq.game_model import TimeGrid
from stacklq.kernels import LinearSDE, simulate_costs, simulate_group_means, simulate_paths
from stacklq.rng import brownian_increments, normals_block, normals_np, philox_block, philox_blocks_np

needs_numba = pytest.mark.skipif(not _numba.ENABLED, reason="numba disabled")

u64 = st.integers(0, 2 ** 64 - 1)


@settings(max_examples=60, deadline=None)
@given(u64, u64, u64, u64)
def test_philox_matches_numpy_reference(k0, k1, step, stream):
    ours = philox_blocks_np(k0, k1, step, 0, 0, stream)
    # numpy increments its counter before producing a block
    ref = np.random.Philox(key=np.array([k0, k1], dtype=np.uint64),
                           counter=np.array([(step - 1) % 2 ** 64, 0, 0, stream],
                                            dtype=np.uint64))
    if step == 0:   # the decrement borrows from the next counter word
        ref = np.random.Philox(key=np.array([k0, k1], dtype=np.uint64),
                               counter=np.array([2 ** 64 - 1, 2 ** 64 - 1, 2 ** 64 - 1,
                                                 (stream - 1) % 2 ** 64], dtype=np.uint64))
    assert np.array_equal(ours, ref.random_raw(4))


@settings(max_examples=30, deadline=None)
@given(u64, u64, st.integers(0, 10 ** 6), st.integers(0, 50))
def test_scalar_and_vector_generators_agree(seed, path, step, stream):
    a = np.array(normals_block(np.uint64(seed), np.uint64(path), np.uint64(step),
                               np.uint64(stream)))
    b = normals_np(np.uint64(seed), np.uint64(path), np.uint64(step), np.uint64(stream))
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(b))
    w = np.array(philox_block(np.uint64(seed), np.uint64(path), np.uint64(step),
                              np.uint64(0), np.uint64(0), np.uint64(stream)), dtype=np.uint64)
    assert np.array_equal(w, philox_blocks_np(seed, path, step, 0, 0, stream))


def test_increment_moments():
    h = 0.01
    dW = brownian_increments(3, np.arange(4000), 50, h)
    z = dW.reshape(-1, 3) / np.sqrt(h)
    n = z.shape[0]
    assert np.all(np.abs(z.mean(axis=0)) < 4.0 / np.sqrt(n))
    assert np.all(np.abs(z.var(axis=0) - 1.0) < 4.0 * np.sqrt(2.0 / n))
    corr = np.corrcoef(z.T)
    assert np.all(np.abs(corr[np.triu_indices(3, 1)]) < 4.0 / np.sqrt(n))
    # fourth moment of a standard normal is 3
    assert abs((z ** 4).mean() - 3.0) < 0.1


def test_increments_depend_only_on_their_counter():
    full = brownian_increments(9, np.arange(10), 20, 0.1)
    part = brownian_increments(9, [7, 2], 20, 0.1)
    assert np.array_equal(part, full[[7, 2]])
    other = brownian_increments(10, np.arange(10), 20, 0.1)
    assert not np.array_equal(full, other)


def test_streams_select_independent_noise():
    a = brownian_increments(1, [0], 5, 1.0, streams=[[0, 0, 0]])
    b = brownian_increments(1, [0], 5, 1.0, streams=[[0, 1, 0]])
    assert np.array_equal(a[..., [0, 2]], b[..., [0, 2]])
    assert not np.array_equal(a[..., 1], b[..., 1])


# -- linear SDE kernels ---------------------------------------------------------

def random_sde(rng, d=3, n_steps=40, additive=True):
    grid = TimeGrid(1.0, n_steps)
    D = rng.normal(size=(n_steps, d, d)) * 0.3
    G = rng.normal(size=(n_steps, 3, d, d)) * 0.2
    G[:, 1, 0, :] = 0.0
    s = rng.normal(size=(3, d)) * 0.1 if additive else np.zeros((3, d))
    return LinearSDE(grid, D, G, s, rng.normal(size=d))


def test_noise_free_paths_follow_euler_recursion(rng):
    sde = random_sde(rng)
    sde = LinearSDE(sde.grid, sde.D, np.zeros_like(sde.G), np.zeros_like(sde.s), sde.z0)
    Z, _ = simulate_paths(sde, 0, [0, 1], backend="numpy")
    z = sde.z0.copy()
    for k in range(sde.grid.n_steps):
        z = z + sde.grid.h * sde.D[k] @ z
    assert np.allclose(Z[0, -1], z, rtol=1e-13, atol=1e-13)
    assert np.array_equal(Z[0], Z[1])


def test_paths_are_reproducible_and_order_free(rng):
    sde = random_sde(rng)
    Z, dW = simulate_paths(sde, 5, np.arange(8))
    Z2, dW2 = simulate_paths(sde, 5, [6, 1])
    assert np.array_equal(Z2, Z[[6, 1]]) and np.array_equal(dW2, dW[[6, 1]])


@needs_numba
def test_compiled_and_numpy_paths_agree(rng):
    sde = random_sde(rng)
    ids = np.arange(50)
    Za, dWa = simulate_paths(sde, 2, ids, backend="numba")
    Zb, dWb = simulate_paths(sde, 2, ids, backend="numpy")
    assert np.max(np.abs(dWa - dWb)) <= 1e-15
    assert np.max(np.abs(Za - Zb)) <= 1e-12 * (1.0 + np.max(np.abs(Zb)))


@needs_numba
def test_compiled_and_numpy_group_means_agree(rng):
    sde = random_sde(rng, n_steps=20)
    args = (sde, 4, np.arange(6), 30, [False, True, True], [0, 2])
    a = simulate_group_means(*args, backend="numba")
    b = simulate_group_means(*args, backend="numpy")
    assert np.max(np.abs(a - b)) <= 1e-12


@needs_numba
def test_compiled_and_numpy_costs_agree(rng):
    sde = random_sde(rng, n_steps=20)
    N, d = sde.grid.n_steps, sde.dim
    C = rng.normal(size=(N + 1, 2, d))
    W = np.stack([np.eye(2), np.diag([1.0, 3.0])])
    WT = np.stack([np.eye(2), np.zeros((2, 2))])
    a = simulate_costs(sde, 8, np.arange(40), C, W, WT, backend="numba")
    b = simulate_costs(sde, 8, np.arange(40), C, W, WT, backend="numpy")
    assert np.max(np.abs(a - b)) <= 1e-12 * (1.0 + np.max(np.abs(b)))


def test_costs_match_path_quadrature(rng):
    sde = random_sde(rng, n_steps=20)
    N, d, h = sde.grid.n_steps, sde.dim, sde.grid.h
    C = rng.normal(size=(N + 1, 2, d))
    W = np.stack([np.diag([1.0, 2.0])])
    WT = np.stack([np.eye(2)])
    costs = simulate_costs(sde, 1, np.arange(5), C, W, WT)
    Z, _ = simulate_paths(sde, 1, np.arange(5))
    y = np.einsum("kad,nkd->nka", C, Z)
    q = 0.5 * np.einsum("nka,ab,nkb->nk", y, W[0], y)
    w = np.full(N + 1, h)
    w[[0, -1]] = 0.5 * h
    expected = q @ w + 0.5 * np.einsum("na,ab,nb->n", y[:, -1], WT[0], y[:, -1])
    assert np.allclose(costs[:, 0], expected, rtol=1e-12, atol=1e-14)


def test_full_observation_group_mean_is_the_path(rng):
    sde = random_sde(rng, n_steps=10)
    Z, _ = simulate_paths(sde, 3, np.arange(4))
    means = simulate_group_means(sde, 3, np.arange(4), 5, [True, True, True], [0, 1, 2])
    assert np.allclose(means, Z, rtol=0, atol=1e-12)


@pytest.mark.parametrize("backend", ["numpy"] + (["numba"] if _numba.ENABLED else []))
def test_exploding_path_raises(backend):
    grid = TimeGrid(1.0, 10)
    D = np.full((10, 1, 1), 1e4)
    sde = LinearSDE(grid, D, np.zeros((10, 3, 1, 1)), np.zeros((3, 1)), np.ones(1))
    with pytest.raises(NonFinite):
        simulate_paths(sde, 0, [0, 1], backend=backend)
