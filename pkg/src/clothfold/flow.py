"""Dense optical flow, its HSV encoding, Canny edges and the motion contour mask."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy import ndimage

__all__ = [
    "FlowEstimator",
    "HornSchunckPyramid",
    "to_gray",
    "dense_flow",
    "flow_to_hsv",
    "canny",
    "MotionContour",
    "motion_contour",
]


def to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=float)
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[2] == 1:
        return frame[..., 0]
    if frame.ndim == 3 and frame.shape[2] == 3:
        return frame @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"cannot convert frame of shape {frame.shape} to grayscale")


class FlowEstimator(Protocol):
    def __call__(self, prev: np.ndarray, curr: np.ndarray) -> np.ndarray: ...


def _warp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    h, w = img.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    coords = np.stack([rows + flow[..., 1], cols + flow[..., 0]])
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


_AVG = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=float) / 12.0


@dataclass(frozen=True)
class HornSchunckPyramid:
    """Coarse-to-fine variational flow with image warping.

    Each pyramid level re-linearizes the brightness constancy term around the
    current estimate (``warps`` times) and solves for the flow with Jacobi
    sweeps of the Horn-Schunck equations. Pixels without image gradient get an
    extra pull towards zero (``damping``), so flat static areas stay still.
    """

    alpha: float = 0.05
    damping: float = 1e-2
    texture: float = 1e-3
    iterations: int = 60
    warps: int = 3
    min_size: int = 16
    presmooth: float = 0.8

    def __call__(self, prev: np.ndarray, curr: np.ndarray) -> np.ndarray:
        i0 = ndimage.gaussian_filter(prev, self.presmooth) if self.presmooth else prev
        i1 = ndimage.gaussian_filter(curr, self.presmooth) if self.presmooth else curr
        pyramid = [(i0, i1)]
        while min(pyramid[-1][0].shape) // 2 >= self.min_size:
            a, b = pyramid[-1]
            pyramid.append((_downsample(a), _downsample(b)))
        flow = np.zeros(pyramid[-1][0].shape + (2,))
        for level, (a, b) in enumerate(reversed(pyramid)):
            if level > 0:
                flow = _upsample_flow(flow, a.shape)
            for _ in range(self.warps):
                flow = self._relax(a, _warp(b, flow), flow)
        return flow

    def _relax(self, a: np.ndarray, bw: np.ndarray, flow: np.ndarray) -> np.ndarray:
        # linearize around the current flow; the damping term pulls textureless
        # regions towards zero motion instead of letting the smoothness term
        # spread motion across them
        avg = 0.5 * (a + bw)
        iy, ix = np.gradient(avg)
        u0, v0 = flow[..., 0], flow[..., 1]
        it = bw - a - ix * u0 - iy * v0
        grad2 = ix**2 + iy**2
        d = self.alpha**2 + self.damping * np.exp(-grad2 / self.texture**2)
        kappa = self.alpha**2 / d
        denom = d + grad2
        u, v = u0.copy(), v0.copy()
        for _ in range(self.iterations):
            ub = kappa * ndimage.convolve(u, _AVG, mode="nearest")
            vb = kappa * ndimage.convolve(v, _AVG, mode="nearest")
            t = (ix * ub + iy * vb + it) / denom
            u = ub - ix * t
            v = vb - iy * t
        return np.stack([u, v], axis=-1)


def _downsample(img: np.ndarray) -> np.ndarray:
    sm = ndimage.gaussian_filter(img, 1.0)
    return sm[::2, ::2]


def _upsample_flow(flow: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    fh, fw = flow.shape[:2]
    zoom = (h / fh, w / fw)
    out = np.stack([ndimage.zoom(flow[..., k], zoom, order=1, mode="nearest", grid_mode=True) for k in range(2)], axis=-1)
    out[..., 0] *= w / fw
    out[..., 1] *= h / fh
    return out[:h, :w]


def dense_flow(prev: np.ndarray, curr: np.ndarray, estimator: FlowEstimator | None = None) -> np.ndarray:
    """Per-pixel displacement ``(u, v)`` in pixels from ``prev`` to ``curr``.

    ``u`` runs along columns, ``v`` along rows. Returns an ``(h, w, 2)`` array.
    """
    a, b = to_gray(prev), to_gray(curr)
    if a.shape != b.shape:
        raise ValueError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    est = estimator if estimator is not None else HornSchunckPyramid()
    flow = np.asarray(est(a, b), dtype=float)
    if flow.shape != a.shape + (2,) or not np.all(np.isfinite(flow)):
        raise ValueError("flow estimator returned a malformed field")
    return flow


def flow_to_hsv(flow: np.ndarray) -> np.ndarray:
    """RGB rendering of a flow field: hue is direction, value is normalized speed."""
    flow = np.asarray(flow, dtype=float)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    ang = np.arctan2(flow[..., 1], flow[..., 0])
    hue = np.mod(ang, 2 * np.pi) / (2 * np.pi)
    scale = np.percentile(mag, 99)
    if scale <= 1e-12:
        val = np.zeros_like(mag)
    else:
        val = np.minimum(mag / scale, 1.0)
    hsv = np.stack([hue, np.ones_like(hue), val], axis=-1)
    return hsv_to_rgb(hsv)


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float) / 4.0


def canny(image: np.ndarray, low: float = 0.1, high: float = 0.3, sigma: float = 1.0) -> np.ndarray:
    """Canny edge map of a grayscale or multichannel image with values in [0, 1].

    For color input the gradient of the strongest channel is used per pixel.
    Thresholds apply to the gradient magnitude, which is close to the step
    height for a sharp unit edge.
    """
    if not low < high:
        raise ValueError(f"canny_low must be below canny_high, got {low} >= {high}")
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    gx = np.empty(img.shape)
    gy = np.empty(img.shape)
    for c in range(img.shape[2]):
        sm = ndimage.gaussian_filter(img[..., c], sigma, mode="nearest") if sigma > 0 else img[..., c]
        gx[..., c] = ndimage.correlate(sm, _SOBEL_X, mode="nearest")
        gy[..., c] = ndimage.correlate(sm, _SOBEL_X.T, mode="nearest")
    mags = np.hypot(gx, gy)
    best = np.argmax(mags, axis=2)[..., None]
    mag = np.take_along_axis(mags, best, 2)[..., 0]
    gx = np.take_along_axis(gx, best, 2)[..., 0]
    gy = np.take_along_axis(gy, best, 2)[..., 0]

    # non-maximum suppression over four quantized directions
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1)
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dr, dc) in offsets.items():
        fwd = padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        bwd = padded[1 - dr : 1 - dr + h, 1 - dc : 1 - dc + w]
        keep |= (sector == s) & (mag >= fwd) & (mag > bwd)
    thin = np.where(keep, mag, 0.0)

    strong = thin >= high
    weak = thin >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(weak)
    connected = np.zeros(n + 1, dtype=bool)
    connected[np.unique(labels[strong])] = True
    connected[0] = False
    return connected[labels]


@dataclass(frozen=True)
class MotionContour:
    mask: np.ndarray
    edges: np.ndarray
    degenerate: bool

    def __array__(self, dtype=None, copy=None):
        return self.mask if dtype is None else self.mask.astype(dtype)


CONTOUR_CLOSE = 4


def motion_contour(flow: np.ndarray, canny_low: float = 0.1, canny_high: float = 0.3,
                   close: int = CONTOUR_CLOSE) -> MotionContour:
    """Region enclosed by Canny edges of the HSV-encoded flow.

    Moving pixels on the image frame count as edges, so regions cut by the
    border still close. Edges are closed with ``close`` dilations, interior
    holes are filled from the border complement, and the dilation is undone. A field that moves but
    yields no enclosed region, or whose region covers nearly the whole frame,
    is flagged degenerate.
    """
    if not canny_low < canny_high:
        raise ValueError(f"canny_low must be below canny_high, got {canny_low} >= {canny_high}")
    flow = np.asarray(flow, dtype=float)
    hsv = flow_to_hsv(flow)
    edges = canny(hsv, canny_low, canny_high)
    # moving pixels on the image frame close regions that leave the view
    rim = np.zeros(edges.shape, dtype=bool)
    rim[[0, -1], :] = True
    rim[:, [0, -1]] = True
    edges = edges | (rim & (hsv.max(axis=2) >= canny_high))
    se = np.ones((3, 3))
    closed = ndimage.binary_dilation(edges, structure=se, iterations=close) if close > 0 else edges
    filled = ndimage.binary_fill_holes(closed)
    mask = (ndimage.binary_erosion(filled, structure=se, iterations=close, border_value=1) if close > 0 else filled)
    mask |= filled & edges
    moving = np.hypot(flow[..., 0], flow[..., 1]).max() > 1e-6
    frac = mask.mean()
    degenerate = bool((moving and frac == 0.0) or frac > 0.9)
    return MotionContour(mask, edges, degenerate)
