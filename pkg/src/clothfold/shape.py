"""Cloth-state descriptors from a binary mask and a linear max-margin classifier.

Coordinates follow the image convention: ``x`` is the column index and ``y``
the row index. Moments up to order three are accumulated in exact integer
arithmetic relative to the mask bounding box, then centred with rational
arithmetic, so translated and lattice-rotated masks produce bit-identical
central, normalized and Hu features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Sequence

import numpy as np
from skimage.measure import approximate_polygon, find_contours

__all__ = [
    "EmptyMaskError",
    "centroid",
    "raw_moment",
    "central_moment",
    "normalized_moment",
    "hu_invariants",
    "radial_bin_features",
    "RadialBinFeatures",
    "feature_vector",
    "FEATURE_DIM",
    "N_BINS",
    "ClothStateModel",
    "train_classifier",
    "classify_features",
    "classify_state",
]

N_BINS = 12
BIN_FEATURES = 5
FEATURE_DIM = N_BINS * BIN_FEATURES + 7
DP_TOLERANCE = 2.0


class EmptyMaskError(ValueError):
    """Raised when a feature needs at least one foreground pixel."""


def _as_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    return m.astype(bool)


def _nonempty(mask) -> np.ndarray:
    m = _as_mask(mask)
    if not m.any():
        raise EmptyMaskError("mask has no foreground pixels")
    return m


def centroid(mask) -> tuple[float, float]:
    """Mean foreground coordinate ``(x_bar, y_bar)``."""
    m = _nonempty(mask)
    ys, xs = np.nonzero(m)
    n = len(xs)
    return (float(Fraction(int(xs.sum()), n)), float(Fraction(int(ys.sum()), n)))


def raw_moment(mask, p: int, q: int) -> float:
    """``sum f(x, y) x^p y^q`` over the image grid."""
    if p < 0 or q < 0:
        raise ValueError("moment orders must be nonnegative")
    m = _as_mask(mask)
    cols = m.sum(axis=0)
    rows = m.sum(axis=1)
    if q == 0:
        return float(sum(int(c) * x**p for x, c in enumerate(cols) if c))
    if p == 0:
        return float(sum(int(r) * y**q for y, r in enumerate(rows) if r))
    ys, xs = np.nonzero(m)
    return float(sum(int(x) ** p * int(y) ** q for x, y in zip(xs, ys)))


@dataclass(frozen=True)
class _Moments:
    """Exact moment bookkeeping of one mask up to order three."""

    m00: int
    mu: dict  # (p, q) -> Fraction, central moments

    @classmethod
    def of(cls, mask) -> "_Moments":
        m = _nonempty(mask)
        ys, xs = np.nonzero(m)
        xs = (xs - xs.min()).astype(np.int64)
        ys = (ys - ys.min()).astype(np.int64)
        raw = {}
        for p in range(4):
            for q in range(4 - p):
                raw[p, q] = int(np.sum(xs**p * ys**q))
        n = raw[0, 0]
        xb = Fraction(raw[1, 0], n)
        yb = Fraction(raw[0, 1], n)
        mu = {}
        for p in range(4):
            for q in range(4 - p):
                acc = Fraction(0)
                for i in range(p + 1):
                    for j in range(q + 1):
                        acc += comb(p, i) * comb(q, j) * (-xb) ** (p - i) * (-yb) ** (q - j) * raw[i, j]
                mu[p, q] = acc
        return cls(n, mu)

    def central(self, p: int, q: int) -> float:
        return float(self.mu[p, q])

    def normalized(self, p: int, q: int) -> float:
        order = p + q
        if order % 2 == 0:
            return float(self.mu[p, q] / Fraction(self.m00) ** (order // 2 + 1))
        return float(self.mu[p, q] / Fraction(self.m00) ** ((order + 1) // 2)) / np.sqrt(self.m00)


def central_moment(mask, p: int, q: int) -> float:
    if p < 0 or q < 0:
        raise ValueError("moment orders must be nonnegative")
    if p + q <= 3:
        return _Moments.of(mask).central(p, q)
    m = _nonempty(mask)
    ys, xs = np.nonzero(m)
    n = len(xs)
    xb, yb = Fraction(int(xs.sum()), n), Fraction(int(ys.sum()), n)
    return float(sum((int(x) - xb) ** p * (int(y) - yb) ** q for x, y in zip(xs, ys)))


def normalized_moment(mask, p: int, q: int) -> float:
    if p + q < 2:
        raise ValueError(f"normalized moments need p + q >= 2, got p={p}, q={q}")
    if p + q <= 3:
        return _Moments.of(mask).normalized(p, q)
    m00 = float(_nonempty(mask).sum())
    return central_moment(mask, p, q) / m00 ** ((p + q + 2) / 2)


def hu_invariants(mask) -> np.ndarray:
    """The seven Hu moment invariants."""
    mo = _Moments.of(mask)
    n20, n02, n11 = mo.normalized(2, 0), mo.normalized(0, 2), mo.normalized(1, 1)
    n30, n21, n12, n03 = mo.normalized(3, 0), mo.normalized(2, 1), mo.normalized(1, 2), mo.normalized(0, 3)
    a = n30 + n12
    b = n21 + n03
    c = n30 - 3 * n12
    d = 3 * n21 - n03
    phi1 = n20 + n02
    phi2 = (n20 - n02) ** 2 + 4 * n11**2
    phi3 = c**2 + d**2
    phi4 = a**2 + b**2
    phi5 = c * a * (a**2 - 3 * b**2) + d * b * (3 * a**2 - b**2)
    # a * b grouped first keeps lattice rotations bit-exact
    phi6 = (n20 - n02) * (a**2 - b**2) + 4 * n11 * (a * b)
    phi7 = d * a * (a**2 - 3 * b**2) - c * b * (3 * a**2 - b**2)
    return np.array([phi1, phi2, phi3, phi4, phi5, phi6, phi7])


@dataclass(frozen=True)
class RadialBinFeatures:
    """Per-bin (critical points, area, eccentricity, perimeter, orientation)."""

    critical_points: np.ndarray
    area: np.ndarray
    eccentricity: np.ndarray
    perimeter: np.ndarray
    orientation: np.ndarray

    def as_array(self) -> np.ndarray:
        """(12, 5) table, one row per bin."""
        return np.stack(
            [self.critical_points, self.area, self.eccentricity, self.perimeter, self.orientation], axis=1
        ).astype(float)


def _bin_index(mask: np.ndarray, center=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bin label per foreground pixel; bin 0 starts east and bins advance counterclockwise on screen."""
    ys, xs = np.nonzero(mask)
    if center is None:
        n = len(xs)
        # offsets from the centroid scaled by n keep everything in integers
        dx = xs.astype(np.int64) * n - int(xs.sum())
        dy = ys.astype(np.int64) * n - int(ys.sum())
    else:
        dx = xs - float(center[0])
        dy = ys - float(center[1])
    ang = np.arctan2(-dy.astype(float), dx.astype(float))
    ang = np.mod(ang, 2 * np.pi)
    bins = np.minimum((ang // (2 * np.pi / N_BINS)).astype(int), N_BINS - 1)
    return ys, xs, bins


def _critical_points(region: np.ndarray) -> int:
    padded = np.pad(region, 1).astype(float)
    contours = find_contours(padded, 0.5)
    if not contours:
        return 0
    longest = max(contours, key=len)
    poly = approximate_polygon(longest, tolerance=DP_TOLERANCE)
    n = len(poly)
    if n > 1 and np.allclose(poly[0], poly[-1]):
        n -= 1
    return int(n)


def radial_bin_features(mask, center: tuple[float, float] | None = None) -> RadialBinFeatures:
    """Per-bin region descriptors; bins are taken about the centroid unless ``center=(x, y)`` is given."""
    m = _nonempty(mask)
    ys, xs, bins = _bin_index(m, center)
    padded = np.pad(m, 1)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    boundary = ~interior[ys, xs]

    crit = np.zeros(N_BINS)
    area = np.zeros(N_BINS)
    ecc = np.zeros(N_BINS)
    perim = np.zeros(N_BINS)
    orient = np.zeros(N_BINS)
    y0, x0 = ys.min(), xs.min()
    h, w = ys.max() - y0 + 1, xs.max() - x0 + 1
    for b in range(N_BINS):
        sel = bins == b
        k = int(sel.sum())
        if k == 0:
            continue
        area[b] = k
        perim[b] = boundary[sel].sum()
        bx, by = xs[sel].astype(float), ys[sel].astype(float)
        cxx = np.mean((bx - bx.mean()) ** 2)
        cyy = np.mean((by - by.mean()) ** 2)
        cxy = np.mean((bx - bx.mean()) * (by - by.mean()))
        tr = cxx + cyy
        det_term = np.sqrt(max(((cxx - cyy) / 2) ** 2 + cxy**2, 0.0))
        l1, l2 = tr / 2 + det_term, tr / 2 - det_term
        ecc[b] = np.sqrt(max(1.0 - l2 / l1, 0.0)) if l1 > 0 else 0.0
        orient[b] = 0.5 * np.arctan2(2 * cxy, cxx - cyy)
        region = np.zeros((h, w), dtype=bool)
        region[ys[sel] - y0, xs[sel] - x0] = True
        crit[b] = _critical_points(region)
    return RadialBinFeatures(crit, area, ecc, perim, orient)


def feature_vector(mask) -> np.ndarray:
    """Radial-bin table (bin-major, 60 values) followed by the 7 Hu invariants."""
    return np.concatenate([radial_bin_features(mask).as_array().ravel(), hu_invariants(mask)])


# ---------------------------------------------------------------- classifier


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClothStateModel:
    """One-vs-rest linear scores ``W x + b`` over raw feature vectors."""

    classes: tuple[str, ...]
    weights: np.ndarray  # (n_classes, dim)
    bias: np.ndarray  # (n_classes,)
    trained: bool = True
    info: dict = field(default_factory=dict, compare=False)

    def scores(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.weights.T + self.bias

    def to_record(self) -> dict:
        return {
            "classes": list(self.classes),
            "weights": self.weights,
            "bias": self.bias,
            "trained": self.trained,
            "info": self.info,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ClothStateModel":
        return cls(
            tuple(rec["classes"]),
            np.asarray(rec["weights"], dtype=float),
            np.asarray(rec["bias"], dtype=float),
            bool(rec.get("trained", True)),
            dict(rec.get("info", {})),
        )


def train_classifier(
    features: Sequence[np.ndarray],
    labels: Sequence,
    epochs: int = 200,
    reg: float = 1e-3,
    seed: int = 0,
    lr: float = 0.1,
) -> ClothStateModel:
    """One-vs-rest linear SVM trained by subgradient descent on the hinge loss.

    Features are standardized internally and the scaling is folded back into
    the returned weights, so the model acts on raw feature vectors.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or len(X) != len(labels):
        raise ValueError("features must be (n, d) with one label per row")
    classes = tuple(sorted({str(l) for l in labels}))
    if len(classes) < 2:
        raise ValueError(f"need at least two classes, got {classes}")
    y = np.array([classes.index(str(l)) for l in labels])
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    n, d = Z.shape
    W = np.zeros((len(classes), d))
    b = np.zeros(len(classes))
    rng = np.random.default_rng(seed)
    step = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            step += 1
            eta = lr / (1.0 + lr * reg * step)
            target = np.where(np.arange(len(classes)) == y[i], 1.0, -1.0)
            margin = target * (W @ Z[i] + b)
            viol = margin < 1.0
            W *= 1.0 - eta * reg
            W[viol] += eta * target[viol, None] * Z[i]
            b[viol] += eta * target[viol]
    Wr = W / scale
    br = b - Wr @ mean
    return ClothStateModel(classes, Wr, br, True, {"epochs": epochs, "reg": reg, "seed": seed})


def classify_features(x: np.ndarray, model: ClothStateModel) -> tuple[str, float]:
    if not model.trained:
        raise UntrainedModelError("classifier has not been trained")
    s = model.scores(x)
    order = np.argsort(-s, kind="stable")
    margin = float(s[order[0]] - s[order[1]]) if len(s) > 1 else float(s[order[0]])
    return model.classes[order[0]], margin


def classify_state(mask, model: ClothStateModel) -> tuple[str, float]:
    """Label and top-minus-runner-up margin for one cloth mask."""
    return classify_features(feature_vector(mask), model)
