"""Per-layer k-means weight sharing.

Each quantized weight tensor is replaced by a codebook of ``2**bits`` scalar
centroids plus an index per weight. Gradients of the reconstructed weights
are summed per centroid to train the codebook while the assignments stay
fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import NumericalError, ShapeError
from .models import ModelGraph, rng_for

MAX_BITS = 16


@dataclass
class LayerCodebook:
    bits: int
    centroids: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bit length must be in [1, {MAX_BITS}], got {self.bits}")
        if self.centroids.shape != (1 << self.bits,):
            raise ShapeError(
                f"codebook of {self.bits} bits needs {1 << self.bits} centroids, got {self.centroids.shape}"
            )
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.k):
            raise IndexError("codebook index outside [0, k)")

    @property
    def k(self) -> int:
        return 1 << self.bits

    def reconstruct(self) -> np.ndarray:
        return self.centroids[self.indices]

    def sse(self, weights) -> float:
        w = np.asarray(weights, dtype=np.float64).reshape(self.indices.shape)
        return float(np.sum((w - self.centroids.astype(np.float64)[self.indices]) ** 2))


def assign(weights, centroids) -> np.ndarray:
    """Index of the nearest centroid for every weight; ties go to the lowest index."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    c = np.asarray(centroids, dtype=np.float64)
    k = c.size
    order = np.argsort(c, kind="stable")
    cs = c[order]
    pos = np.searchsorted(cs, w, side="left")
    right = np.minimum(pos, k - 1)
    has_left = pos > 0
    left = np.where(has_left, pos - 1, 0)
    # first element of the run of equal values holds the lowest original index
    left = np.searchsorted(cs, cs[left], side="left")
    dl = np.where(has_left, w - cs[left], np.inf)
    dr = np.where(pos < k, cs[right] - w, np.inf)
    li, ri = order[left], order[right]
    pick_left = (dl < dr) | ((dl == dr) & (li < ri))
    return np.where(pick_left, li, ri)


def _sse(w, c, idx) -> float:
    return float(np.sum((w - c[idx]) ** 2))


def _lloyd(w, c, max_iters, trace):
    k = c.size
    idx = assign(w, c)
    trace.append(_sse(w, c, idx))
    converged = False
    for _ in range(max_iters):
        counts = np.bincount(idx, minlength=k)
        sums = np.bincount(idx, weights=w, minlength=k)
        new_c = c.copy()
        live = counts > 0
        new_c[live] = sums[live] / counts[live]
        empty = np.flatnonzero(~live)
        if empty.size:
            _reseed(w, new_c, idx, empty)
        new_idx = assign(w, new_c)
        trace.append(_sse(w, new_c, new_idx))
        converged = not empty.size and np.array_equal(new_idx, idx)
        c, idx = new_c, new_idx
        if converged:
            break
    return c, idx, converged


def _reseed(w, c, idx, empty) -> None:
    # move each empty centroid onto the weight farthest from its own centroid
    dist = (w - c[idx]) ** 2
    taken = set(c[np.setdiff1d(np.arange(c.size), empty)].tolist())
    for pos in np.argsort(-dist, kind="stable"):
        if not empty.size:
            break
        v = float(w[pos])
        if v in taken:
            continue
        c[empty[0]] = v
        taken.add(v)
        empty = empty[1:]


def _dsquared_seeds(uniq: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding over the distinct values: each new seed is drawn with
    probability proportional to its squared distance from the nearest seed so far."""
    seeds = np.empty(k)
    seeds[0] = uniq[rng.integers(uniq.size)]
    d2 = (uniq - seeds[0]) ** 2
    for j in range(1, k):
        total = d2.sum()
        pick = rng.choice(uniq.size, p=d2 / total) if total > 0 else rng.integers(uniq.size)
        seeds[j] = uniq[pick]
        d2 = np.minimum(d2, (uniq - seeds[j]) ** 2)
    return np.sort(seeds)


def kmeans_fit(
    weights,
    bits: int,
    max_iters: int = 300,
    seed: int = 0,
    restarts: int = 1,
    init=None,
    trace: list | None = None,
) -> LayerCodebook:
    """Fit a ``2**bits`` entry codebook to ``weights`` with 1-D Lloyd iterations.

    Each restart seeds its centroids with k-means++ over the distinct weight
    values; the restart with the lowest within-cluster sum of squares wins. ``init``
    warm-starts a single run from given centroids instead. When the weights
    hold at most ``k`` distinct values the codebook is exact, with the spare
    entries duplicating the largest value (they are never addressed).

    ``trace``, if given, receives one list of per-iteration SSE values per run.
    """
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bit length must be in [1, {MAX_BITS}], got {bits}")
    arr = np.asarray(weights)
    if arr.size < 1:
        raise ValueError("kmeans_fit needs at least one weight")
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
    w = arr.astype(np.float64).ravel()
    k = 1 << bits
    uniq = np.unique(w)

    if uniq.size <= k:
        c = np.concatenate([uniq, np.full(k - uniq.size, uniq[-1])])
        best_c = c
    else:
        best_c, best_sse = None, np.inf
        if init is not None:
            starts = [np.asarray(init, dtype=np.float64).copy()]
            if starts[0].shape != (k,):
                raise ShapeError(f"init must hold {k} centroids, got {starts[0].shape}")
        else:
            rng = rng_for(seed)
            starts = [_dsquared_seeds(uniq, k, rng) for _ in range(max(1, restarts))]
        for c0 in starts:
            run: list[float] = []
            c, idx, _ = _lloyd(w, c0, max_iters, run)
            if trace is not None:
                trace.append(run)
            s = _sse(w, c, idx)
            if s < best_sse:
                best_c, best_sse = c, s

    centroids = best_c.astype(dtype)
    indices = assign(w, centroids).reshape(arr.shape).astype(np.int32)
    return LayerCodebook(bits, centroids, indices)


def reconstruct(cb: LayerCodebook, shape=None) -> np.ndarray:
    """Look up each weight's centroid."""
    shape = cb.indices.shape if shape is None else tuple(shape)
    if int(np.prod(shape)) != cb.indices.size:
        raise ShapeError(f"reconstruct: {cb.indices.size} indices cannot fill shape {shape}")
    return cb.centroids[cb.indices].reshape(shape)


def centroid_gradient(weight_grad, indices, k: int) -> np.ndarray:
    """Sum of weight gradients over the weights assigned to each centroid."""
    g = np.asarray(weight_grad)
    idx = np.asarray(indices)
    if g.shape != idx.shape:
        raise ShapeError(f"centroid_gradient: grad {g.shape} vs indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise IndexError(f"centroid_gradient: index outside [0, {k})")
    out = np.bincount(idx.ravel(), weights=g.ravel().astype(np.float64), minlength=k)
    return out.astype(g.dtype if g.dtype.kind == "f" else np.float64, copy=False)


def apply_codebook_step(cb: LayerCodebook, grad_c, lr: float) -> LayerCodebook:
    """``C <- C - lr * grad``; indices are left untouched."""
    g = np.asarray(grad_c)
    if g.shape != cb.centroids.shape:
        raise ShapeError(f"apply_codebook_step: grad {g.shape} vs centroids {cb.centroids.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("apply_codebook_step: non-finite centroid gradient")
    dt = cb.centroids.dtype
    new = (cb.centroids - dt.type(lr) * g.astype(dt, copy=False)).astype(dt, copy=False)
    return LayerCodebook(cb.bits, new, cb.indices)


@dataclass(frozen=True)
class QuantPolicy:
    """Which tensors get codebooks. Biases stay full precision by default."""

    quantize_biases: bool = False
    quantize_head: bool = True

    def selects(self, name: str) -> bool:
        if name.startswith("head.") and not self.quantize_head:
            return False
        return name.endswith(".weight") or (self.quantize_biases and name.endswith(".bias"))


@dataclass
class QuantizedModel:
    base: ModelGraph
    codebooks: dict[str, LayerCodebook]
    exempt: set[str] = field(default_factory=set)

    @property
    def bits(self) -> int:
        return next(iter(self.codebooks.values())).bits if self.codebooks else 32

    def reconstructed(self) -> dict[str, np.ndarray]:
        return {name: reconstruct(cb) for name, cb in self.codebooks.items()}

    def weights(self) -> dict[str, Tensor]:
        """Parameter overrides for a forward pass on reconstructed weights."""
        return {name: Tensor._wrap(w) for name, w in self.reconstructed().items()}

    def materialize(self) -> ModelGraph:
        """A copy of the base model with every codebook written back into its weights."""
        m = self.base.clone()
        params = m.parameters()
        for name, w in self.reconstructed().items():
            params[name].data = w.astype(params[name].dtype, copy=True)
        return m

    def distinct_counts(self) -> dict[str, int]:
        return {name: int(np.unique(w).size) for name, w in self.reconstructed().items()}


def quantize_model(
    student: ModelGraph,
    bits: int,
    policy: QuantPolicy | None = None,
    seed: int = 0,
    restarts: int = 3,
    max_iters: int = 300,
    warm_start: QuantizedModel | None = None,
) -> QuantizedModel:
    """Fit one codebook per selected tensor; everything else is copied as-is."""
    if student.role != "student":
        raise ValueError("quantize_model expects a student model")
    policy = policy or QuantPolicy()
    base = student.clone()
    codebooks, exempt = {}, set()
    for i, (name, t) in enumerate(base.parameters().items()):
        if not policy.selects(name):
            exempt.add(name)
            continue
        init = None
        if warm_start is not None and name in warm_start.codebooks:
            prev = warm_start.codebooks[name]
            if prev.bits == bits:
                init = prev.centroids
        codebooks[name] = kmeans_fit(
            t.data, bits, max_iters=max_iters, seed=seed + 7919 * i, restarts=restarts, init=init
        )
    return QuantizedModel(base, codebooks, exempt)
