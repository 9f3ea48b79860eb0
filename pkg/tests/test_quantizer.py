import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quads import autodiff as ad
from quads.autodiff import Tape, Tensor
from quads.errors import NumericalError, ShapeError
from quads.losses import cross_entropy
from quads.models import EncoderConfig, forward_features, head_logits, initialize
from quads.quantizer import (
    LayerCodebook,
    QuantPolicy,
    apply_codebook_step,
    assign,
    centroid_gradient,
    kmeans_fit,
    quantize_model,
    reconstruct,
)

TINY = EncoderConfig(n_mels=6, conv_layers=((3, 5, 2),), ff_layers=(4,), latent_dim=3)


def exhaustive_two_partition_sse(x):
    """Minimum SSE over every split of x into two non-empty groups."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    best = np.inf
    # fix point 0 in group A to skip mirrored labelings
    for mask in itertools.product([False, True], repeat=n - 1):
        in_b = np.array((False,) + mask)
        if not in_b.any():
            continue
        a, b = x[~in_b], x[in_b]
        best = min(best, ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum())
    return best


def test_two_points_pairs():
    cb = kmeans_fit(np.array([0.0, 0.0, 10.0, 10.0]), bits=1)
    assert sorted(cb.centroids.tolist()) == [0.0, 10.0]
    assert cb.sse([0, 0, 10, 10]) == 0.0
    assert exhaustive_two_partition_sse([0, 0, 10, 10]) == 0.0


def test_exact_when_few_distinct_values():
    w = np.array([[1.5, -2.0], [0.25, 1.5], [-2.0, 3.0]], dtype=np.float32)
    cb = kmeans_fit(w, bits=2)
    assert cb.sse(w) == 0.0
    assert np.array_equal(reconstruct(cb), w)
    assert cb.centroids.dtype == np.float32 and cb.indices.dtype == np.int32


def test_best_of_eight_matches_exhaustive_optimum():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 13))
        x = rng.normal(size=n) * rng.uniform(0.5, 3)
        cb = kmeans_fit(x, bits=1, seed=seed, restarts=8)
        hits += abs(cb.sse(x) - exhaustive_two_partition_sse(x)) <= 1e-9
    assert hits >= 95


def test_sse_monotone_per_iteration():
    for seed in range(20):
        x = np.random.default_rng(seed).standard_t(3, size=400)
        trace = []
        kmeans_fit(x, bits=3, seed=seed, restarts=3, trace=trace)
        assert len(trace) == 3
        for run in trace:
            assert all(b <= a + 1e-12 * max(1.0, a) for a, b in zip(run, run[1:])), run


def test_fixed_point_at_termination():
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=300)
        cb = kmeans_fit(x, bits=3, seed=seed)
        c, idx = cb.centroids, cb.indices
        # nearest-centroid assignment
        dist = np.abs(x[:, None] - c[None, :])
        assert np.all(dist[np.arange(x.size), idx] == dist.min(axis=1))
        # every live centroid sits at its cluster mean
        for j in np.unique(idx):
            assert c[j] == pytest.approx(x[idx == j].mean(), rel=1e-12, abs=1e-15)


def test_empty_clusters_reseeded():
    # a warm start with centroids far from the data leaves clusters empty
    x = np.concatenate([np.linspace(0, 1, 50), np.linspace(5, 6, 50)])
    cb = kmeans_fit(x, bits=2, init=[100.0, 101.0, 102.0, 0.5])
    assert len(np.unique(cb.indices)) == 4


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30),
    st.lists(st.integers(-8, 8), min_size=1, max_size=6),
)
def test_assign_matches_brute_force(ws, cs):
    w = np.array(ws)
    c = np.array(cs, dtype=np.float64) / 2  # duplicates and exact ties are likely
    got = assign(w, c)
    for wi, gi in zip(w, got):
        d = np.abs(wi - c)
        assert gi == int(np.flatnonzero(d == d.min())[0])


def test_reconstruct_examples():
    cb = LayerCodebook(1, np.array([-1.0, 2.0]), np.array([0, 1, 1, 0]))
    np.testing.assert_array_equal(reconstruct(cb), [-1, 2, 2, -1])
    np.testing.assert_array_equal(reconstruct(cb, (2, 2)), [[-1, 2], [2, -1]])
    with pytest.raises(ShapeError):
        reconstruct(cb, (3,))


def test_single_centroid_gives_constant():
    x = np.random.default_rng(1).normal(size=20)
    cb = kmeans_fit(x, bits=1)
    cb1 = LayerCodebook(1, np.array([cb.centroids[0]] * 2), np.zeros(20, dtype=np.int32))
    assert np.unique(reconstruct(cb1)).size == 1


def test_centroid_gradient_examples():
    g = np.array([[0.3, -0.1], [0.2, 0.4]])
    np.testing.assert_allclose(centroid_gradient(g, np.array([[0, 1], [0, 1]]), 2), [0.5, 0.3])
    np.testing.assert_array_equal(centroid_gradient(np.zeros((2, 2)), np.zeros((2, 2), int), 4), np.zeros(4))
    with pytest.raises(IndexError):
        centroid_gradient(g, np.array([[0, 2], [0, 1]]), 2)


def test_codebook_step_examples():
    cb = LayerCodebook(1, np.array([1.0, 2.0]), np.array([0, 1]))
    np.testing.assert_array_equal(apply_codebook_step(cb, np.array([0.5, -0.5]), 1.0).centroids, [0.5, 2.5])
    assert np.array_equal(apply_codebook_step(cb, np.array([0.5, -0.5]), 0.0).centroids, cb.centroids)
    with pytest.raises(NumericalError):
        apply_codebook_step(cb, np.array([np.inf, 0.0]), 1.0)


def _task_setup(seed, layer):
    rng = np.random.default_rng(seed)
    student = initialize(TINY, seed=seed, n_classes=3, dtype=np.float64)
    x = rng.normal(size=(4, 11, 6))
    y = rng.integers(0, 3, size=4)
    cb = kmeans_fit(student.parameters()[layer].data, bits=2, seed=seed)
    return student, x, y, cb


def _task_loss(student, x, y, weights):
    z = forward_features(student, x, weights)
    return cross_entropy(head_logits(student, z, weights), y)


@pytest.mark.parametrize("layer", ["ff0.weight", "latent.weight", "head.weight"])
def test_centroid_gradient_matches_finite_differences(layer):
    eps = 1e-6
    for seed in range(20):
        student, x, y, cb = _task_setup(seed, layer)
        w_hat = Tensor(reconstruct(cb), requires_grad=True)
        with Tape() as tape:
            loss = _task_loss(student, x, y, {layer: w_hat})
        tape.backward(loss)
        analytic = centroid_gradient(w_hat.grad, cb.indices, cb.k)
        numeric = np.zeros(cb.k)
        for j in range(cb.k):
            vals = []
            for s in (eps, -eps):
                c = cb.centroids.copy()
                c[j] += s
                w = Tensor(reconstruct(LayerCodebook(cb.bits, c, cb.indices)))
                vals.append(_task_loss(student, x, y, {layer: w}).item())
            numeric[j] = (vals[0] - vals[1]) / (2 * eps)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        assert err.max() <= 1e-5, (layer, seed, analytic, numeric)


def test_centroid_gradient_equals_gather_backward():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 8, size=(6, 5))
    g = rng.normal(size=(6, 5))
    c = Tensor(rng.normal(size=8), requires_grad=True)
    with Tape() as tape:
        y = ad.sum_(ad.mul(ad.gather_rows(c, idx), Tensor(g)))
    tape.backward(y)
    np.testing.assert_allclose(c.grad, centroid_gradient(g, idx, 8), rtol=1e-12)


def test_quantize_model_policy_and_bound():
    student = initialize(EncoderConfig(), seed=0)
    qm = quantize_model(student, 4, seed=0, restarts=1)
    assert not any(name.endswith(".bias") for name in qm.codebooks)
    assert "head.weight" in qm.codebooks
    assert all(n <= 16 for n in qm.distinct_counts().values())
    no_head = quantize_model(student, 4, QuantPolicy(quantize_head=False), restarts=1)
    assert "head.weight" in no_head.exempt


def test_sixteen_bits_lossless_on_small_layers():
    student = initialize(TINY, seed=0)
    qm = quantize_model(student, 16, restarts=1)
    params = student.parameters()
    for name, w in qm.reconstructed().items():
        assert np.array_equal(w, params[name].data)


def test_bits_validated():
    with pytest.raises(ValueError):
        kmeans_fit(np.arange(5.0), bits=17)
    with pytest.raises(ValueError):
        kmeans_fit(np.arange(5.0), bits=0)
