"""Corner seeding, pixel contrastive loss and a trainable patch descriptor.

The descriptor at a pixel is a linear projection of the zero-mean, unit-norm
RGB patch around it. Training pulls descriptors of pixels that see the same
world point together and pushes others at least ``xi`` apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .flow import to_gray

__all__ = [
    "CornerResult",
    "harris_response",
    "harris_corners",
    "contrastive_loss",
    "contrastive_grad",
    "Featurizer",
    "patch_features",
    "descriptor_map",
    "ViewPair",
    "sample_pairs",
    "batch_loss",
    "train_descriptor",
    "MatchResult",
    "match_correspondence",
]


# ---------------------------------------------------------------- corners


@dataclass(frozen=True)
class CornerResult:
    points: list  # (row, col) sub-pixel positions, strongest first
    responses: np.ndarray
    flagged: bool  # fewer than requested


def harris_response(frame: np.ndarray, k: float = 0.05, sigma: float = 1.0) -> np.ndarray:
    img = to_gray(frame)
    iy, ix = np.gradient(img)
    sxx = ndimage.gaussian_filter(ix * ix, sigma)
    syy = ndimage.gaussian_filter(iy * iy, sigma)
    sxy = ndimage.gaussian_filter(ix * iy, sigma)
    return sxx * syy - sxy**2 - k * (sxx + syy) ** 2


def harris_corners(frame: np.ndarray, k: float = 0.05, count: int = 4, nms: int = 5,
                   rel_threshold: float = 0.01, sigma: float = 1.0) -> CornerResult:
    """Strongest ``count`` Harris peaks after non-maximum suppression in a ``nms`` window."""
    R = harris_response(frame, k, sigma)
    top = R.max()
    if not top > 1e-12:
        return CornerResult([], np.zeros(0), count > 0)
    peaks = (R == ndimage.maximum_filter(R, size=nms, mode="constant", cval=-np.inf)) & (R > rel_threshold * top)
    rows, cols = np.nonzero(peaks)
    vals = R[rows, cols]
    order = np.lexsort((cols, rows, -vals))[:count]
    pts = [_refine_peak(R, int(rows[i]), int(cols[i])) for i in order]
    return CornerResult(pts, vals[order], len(pts) < count)


def _refine_peak(R: np.ndarray, r: int, c: int) -> tuple[float, float]:
    """Sub-pixel peak by a parabola through the response on each axis."""
    out = []
    for axis, (i, n) in enumerate(((r, R.shape[0]), (c, R.shape[1]))):
        if 0 < i < n - 1:
            lo = R[i - 1, c] if axis == 0 else R[r, i - 1]
            hi = R[i + 1, c] if axis == 0 else R[r, i + 1]
            den = lo - 2 * R[r, c] + hi
            off = 0.5 * (lo - hi) / den if den < 0 else 0.0
            out.append(i + float(np.clip(off, -0.5, 0.5)))
        else:
            out.append(float(i))
    return tuple(out)


# ---------------------------------------------------------------- loss


def contrastive_loss(dA, dB, is_match: bool, xi: float = 0.5) -> float:
    """Squared distance for matches, squared hinge ``max(0, xi - |dA - dB|)^2`` otherwise."""
    dA = np.asarray(dA, dtype=float)
    dB = np.asarray(dB, dtype=float)
    if dA.shape != dB.shape:
        raise ValueError(f"descriptor dimensions differ: {dA.shape} vs {dB.shape}")
    if not xi > 0:
        raise ValueError(f"xi must be positive, got {xi}")
    d = dA - dB
    if is_match:
        return float(d @ d)
    return float(max(0.0, xi - np.sqrt(d @ d)) ** 2)


def contrastive_grad(dA, dB, is_match: bool, xi: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`contrastive_loss` with respect to ``dA`` and ``dB``."""
    dA = np.asarray(dA, dtype=float)
    dB = np.asarray(dB, dtype=float)
    d = dA - dB
    if is_match:
        g = 2.0 * d
    else:
        dist = np.sqrt(d @ d)
        if dist >= xi or dist == 0.0:
            g = np.zeros_like(d)
        else:
            g = -2.0 * (xi - dist) * d / dist
    return g, -g


def _batch_terms(DA: np.ndarray, DB: np.ndarray, match: np.ndarray, xi: float):
    """Vectorized per-pair losses and gradients with respect to DA."""
    diff = DA - DB
    dist = np.linalg.norm(diff, axis=1)
    hinge = np.maximum(0.0, xi - dist)
    loss = np.where(match, dist**2, hinge**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        gneg = np.where((dist > 0)[:, None], -2.0 * (hinge / dist)[:, None] * diff, 0.0)
    grad = np.where(match[:, None], 2.0 * diff, gneg)
    return loss, grad


# ---------------------------------------------------------------- featurizer


def patch_features(image: np.ndarray, radius: int, pixels: np.ndarray | None = None) -> np.ndarray:
    """Zero-mean, unit-norm flattened RGB patches, edge-padded.

    Returns (h, w, P) for the whole image or (n, P) for the given (row, col) pixels.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    r = radius
    pad = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    win = sliding_window_view(pad, (2 * r + 1, 2 * r + 1), axis=(0, 1))  # (h, w, c, k, k)
    if pixels is not None:
        px = np.asarray(pixels, dtype=int).reshape(-1, 2)
        P = win[px[:, 0], px[:, 1]].reshape(len(px), -1)
    else:
        P = win.reshape(img.shape[0], img.shape[1], -1)
    P = P - P.mean(axis=-1, keepdims=True)
    n = np.linalg.norm(P, axis=-1, keepdims=True)
    return np.where(n > 1e-12, P / np.where(n > 1e-12, n, 1.0), 0.0)


@dataclass(frozen=True)
class Featurizer:
    radius: int
    projection: np.ndarray  # (d, P)
    trained: bool = False

    @classmethod
    def init(cls, radius: int = 3, dim: int = 16, seed: int = 0) -> "Featurizer":
        if radius < 1 or dim < 1:
            raise ValueError("radius and dim must be positive")
        P = 3 * (2 * radius + 1) ** 2
        rng = np.random.default_rng(seed)
        return cls(radius, rng.normal(0.0, 1.0 / np.sqrt(P), (dim, P)), False)

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def describe(self, image: np.ndarray, pixels: np.ndarray | None = None) -> np.ndarray:
        return patch_features(image, self.radius, pixels) @ self.projection.T

    def to_record(self) -> dict:
        return {"radius": self.radius, "projection": self.projection, "trained": self.trained}

    @classmethod
    def from_record(cls, rec: dict) -> "Featurizer":
        return cls(int(rec["radius"]), np.asarray(rec["projection"], dtype=float), bool(rec.get("trained", False)))


def descriptor_map(image: np.ndarray, featurizer: Featurizer) -> np.ndarray:
    """(h, w, d) dense descriptors."""
    return featurizer.describe(image)


# ---------------------------------------------------------------- training data


@dataclass(frozen=True)
class ViewPair:
    """Two renders of one scene with per-pixel world coordinates (NaN off-scene).

    ``project_b`` maps world points (n, 3) to (col, row) pixels of view B.
    """

    image_a: np.ndarray
    image_b: np.ndarray
    world_a: np.ndarray
    world_b: np.ndarray
    project_b: Callable[[np.ndarray], np.ndarray]


def _positives(pair: ViewPair, merge_radius: float) -> tuple[np.ndarray, np.ndarray]:
    """All pixel pairs whose world points agree within the merge radius."""
    valid = np.all(np.isfinite(pair.world_a), axis=-1)
    ra, ca = np.nonzero(valid)
    X = pair.world_a[ra, ca]
    uv = pair.project_b(X)
    h, w = pair.world_b.shape[:2]
    ok = np.all(np.isfinite(uv), axis=1)
    cb = np.full(len(X), -1)
    rb = np.full(len(X), -1)
    cb[ok] = np.rint(uv[ok, 0]).astype(int)
    rb[ok] = np.rint(uv[ok, 1]).astype(int)
    ok &= (cb >= 0) & (cb < w) & (rb >= 0) & (rb < h)
    Xb = np.full_like(X, np.nan)
    Xb[ok] = pair.world_b[rb[ok], cb[ok]]
    ok &= np.linalg.norm(Xb - X, axis=1) <= merge_radius
    return np.column_stack([ra[ok], ca[ok]]), np.column_stack([rb[ok], cb[ok]])


def _textured(image: np.ndarray, radius: int) -> np.ndarray:
    """Pixels whose patch is not constant; flat patches carry no descriptor signal."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    size = 2 * radius + 1
    lo = ndimage.minimum_filter(img, size=(size, size, 1), mode="nearest")
    hi = ndimage.maximum_filter(img, size=(size, size, 1), mode="nearest")
    return np.any(hi - lo > 1e-9, axis=-1)


def _pools(pairs: Sequence[ViewPair], merge_radius: float, radius: int | None) -> list:
    out = []
    for p in pairs:
        A, B = _positives(p, merge_radius)
        if radius is not None and len(A):
            keep = _textured(p.image_a, radius)[A[:, 0], A[:, 1]]
            A, B = A[keep], B[keep]
        out.append((A, B))
    return out


@dataclass(frozen=True)
class PairBatch:
    pair_index: np.ndarray
    pa: np.ndarray  # (n, 2) pixels in A
    pb: np.ndarray  # (n, 2) pixels in B
    match: np.ndarray


def sample_pairs(pairs: Sequence[ViewPair], rng: np.random.Generator, n_pos: int = 64, n_neg: int = 192,
                 merge_radius: float = 0.002, cache: list | None = None, hard_fraction: float = 0.5,
                 hard_min: int = 2, hard_max: int = 8) -> PairBatch:
    """Uniformly sampled positive and negative pixel pairs from one randomly chosen view pair."""
    if cache is None:
        cache = _pools(pairs, merge_radius, None)
    usable = [i for i, (a, _) in enumerate(cache) if len(a)]
    if not usable:
        raise ValueError("no view pair shares a correspondence")
    i = usable[rng.integers(len(usable))]
    A, B = cache[i]
    pos = rng.integers(len(A), size=n_pos)
    h, w = pairs[i].image_b.shape[:2]
    na = rng.integers(len(A), size=n_neg)
    nb = np.column_stack([rng.integers(h, size=n_neg), rng.integers(w, size=n_neg)])
    # half of the negatives sit a few pixels from the true match, where confusions happen
    near = np.arange(n_neg) < int(hard_fraction * n_neg)
    off = rng.integers(hard_min, hard_max + 1, size=(n_neg, 2)) * rng.choice([-1, 1], size=(n_neg, 2))
    nb[near] = np.clip(B[na[near]] + off[near], 0, [h - 1, w - 1])
    # a random pixel in B is a non-match unless it lands within the merge radius of the true match
    wa = pairs[i].world_a[A[na, 0], A[na, 1]]
    wb = pairs[i].world_b[nb[:, 0], nb[:, 1]]
    far = ~(np.linalg.norm(wa - wb, axis=1) <= merge_radius)
    pa = np.concatenate([A[pos], A[na][far]])
    pb = np.concatenate([B[pos], nb[far]])
    match = np.concatenate([np.ones(n_pos, bool), np.zeros(int(far.sum()), bool)])
    return PairBatch(np.full(len(pa), i), pa, pb, match)


def batch_loss(featurizer: Featurizer, pairs: Sequence[ViewPair], batches: Sequence[PairBatch], xi: float = 0.5) -> float:
    total, count = 0.0, 0
    for b in batches:
        p = pairs[b.pair_index[0]]
        DA = featurizer.describe(p.image_a, b.pa)
        DB = featurizer.describe(p.image_b, b.pb)
        loss, _ = _batch_terms(DA, DB, b.match, xi)
        total += loss.sum()
        count += len(loss)
    return total / max(count, 1)


def train_descriptor(
    pairs: Sequence[ViewPair],
    featurizer: Featurizer,
    steps: int = 300,
    lr: float = 0.5,
    xi: float = 0.5,
    seed: int = 0,
    n_pos: int = 64,
    n_neg: int = 192,
    merge_radius: float = 0.002,
    momentum: float = 0.9,
    callback: Callable[[int, Featurizer], None] | None = None,
) -> Featurizer:
    """Stochastic gradient descent with momentum on the mean pair loss."""
    if steps == 0:
        return featurizer
    cache = _pools(pairs, merge_radius, featurizer.radius)
    if not any(len(a) for a, _ in cache):
        raise ValueError("no view pair shares a correspondence")
    rng = np.random.default_rng(seed)
    W = featurizer.projection.copy()
    vel = np.zeros_like(W)
    r = featurizer.radius
    for it in range(steps):
        b = sample_pairs(pairs, rng, n_pos, n_neg, merge_radius, cache)
        p = pairs[b.pair_index[0]]
        FA = patch_features(p.image_a, r, b.pa)
        FB = patch_features(p.image_b, r, b.pb)
        _, g = _batch_terms(FA @ W.T, FB @ W.T, b.match, xi)
        # d loss / d W = gA fA' + gB fB' with gB = -gA
        grad = (g.T @ (FA - FB)) / len(g)
        vel = momentum * vel - lr * grad
        W = W + vel
        if callback is not None:
            callback(it, replace(featurizer, projection=W.copy(), trained=True))
    return replace(featurizer, projection=W, trained=True)


# ---------------------------------------------------------------- matching


@dataclass(frozen=True)
class MatchResult:
    pixel: tuple[int, int]  # (row, col)
    distance: float
    degenerate: bool  # the minimum is shared by more than one pixel


def match_correspondence(source: np.ndarray, point: tuple[int, int], target: np.ndarray) -> MatchResult:
    """Nearest target pixel in descriptor space; ties go to the lowest row, then column."""
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    r, c = point
    if not (0 <= r < source.shape[0] and 0 <= c < source.shape[1]):
        raise IndexError(f"point {point} outside source of shape {source.shape[:2]}")
    q = source[r, c]
    d2 = np.sum((target - q) ** 2, axis=-1)
    best = d2.min()
    flat = int(np.argmax(d2.ravel() == best))  # first in row-major order
    tie = int(np.count_nonzero(d2 == best)) > 1
    return MatchResult(divmod(flat, target.shape[1]), float(np.sqrt(best)), tie)
