"""Static spectral-residual saliency and the refined-flow motion score.

The refined map keeps static saliency only inside the motion contour of the
raw flow. Its score ``1 - exp(-lam * |R|)`` lies in [0, 1) and is thresholded
at ``eps``, equivalently at magnitude ``-ln(1 - eps) / lam``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .flow import MotionContour, dense_flow, flow_to_hsv, motion_contour, to_gray

__all__ = [
    "static_saliency",
    "RefinedFlowMap",
    "refine_flow",
    "saliency_score",
    "segment_threshold",
    "segment",
    "SaliencyResult",
    "saliency_pipeline",
]

SR_SIZE = 64
SR_BOX = 3
SR_SIGMA = 2.5


def static_saliency(frame: np.ndarray, size: int = SR_SIZE, box: int = SR_BOX, sigma: float = SR_SIGMA) -> np.ndarray:
    img = to_gray(frame)
    if img.size == 0:
        raise ValueError("frame is empty")
    h, w = img.shape
    if np.ptp(img) < 1e-12:
        return np.zeros((h, w))
    small = resize(img, (size, size), order=1, anti_aliasing=True, mode="reflect")
    spectrum = np.fft.fft2(small)
    amp = np.abs(spectrum)
    log_amp = np.log(amp + 1e-12)
    residual = log_amp - ndimage.uniform_filter(log_amp, size=box, mode="wrap")
    sal = np.abs(np.fft.ifft2(np.exp(residual + 1j * np.angle(spectrum)))) ** 2
    sal = ndimage.gaussian_filter(sal, sigma, mode="wrap")
    sal = resize(sal, (h, w), order=1, anti_aliasing=False, mode="reflect")
    sal = sal - sal.min()
    top = sal.max()
    if top < 1e-12:
        return np.zeros((h, w))
    return np.clip(sal / top, 0.0, 1.0)


@dataclass(frozen=True)
class RefinedFlowMap:
    """Saliency restricted to the motion contour; zero outside it."""

    magnitude: np.ndarray
    mask: np.ndarray

    def score(self, lam: float) -> np.ndarray:
        return saliency_score(self, lam)


def refine_flow(saliency: np.ndarray, contour) -> RefinedFlowMap:
    saliency = np.asarray(saliency, dtype=float)
    mask = np.asarray(contour.mask if isinstance(contour, MotionContour) else contour, dtype=bool)
    if saliency.shape != mask.shape:
        raise ValueError(f"saliency {saliency.shape} and contour {mask.shape} dimensions differ")
    return RefinedFlowMap(np.where(mask, np.abs(saliency), 0.0), mask)


def _magnitude(refined) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(refined, RefinedFlowMap):
        return refined.magnitude, refined.mask
    mag = np.abs(np.asarray(refined, dtype=float))
    return mag, np.ones(mag.shape, dtype=bool)


def saliency_score(refined, lam: float) -> np.ndarray:
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    mag, mask = _magnitude(refined)
    return np.where(mask, -np.expm1(-lam * mag), 0.0)


def segment_threshold(lam: float, epsilon: float) -> float:
    """Refined magnitude at which the score reaches ``epsilon``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    return -np.log1p(-epsilon) / lam


def segment(refined, lam: float, epsilon: float) -> np.ndarray:
    """Binary motion segmentation of a refined flow map.

    Pixels are kept where the score ``1 - exp(-lam * m)`` reaches ``epsilon``.
    The comparison is made on the score so that thresholding the output of
    :func:`saliency_score` at ``epsilon`` gives the identical mask; the
    magnitude form of the same threshold is :func:`segment_threshold`.
    """
    segment_threshold(lam, epsilon)
    mag, mask = _magnitude(refined)
    return mask & (-np.expm1(-lam * mag) >= epsilon)


@dataclass(frozen=True)
class SaliencyResult:
    flow: np.ndarray
    flow_hsv: np.ndarray
    static: np.ndarray
    contour: MotionContour
    refined: RefinedFlowMap
    score: np.ndarray
    segmentation: np.ndarray


def saliency_pipeline(
    prev: np.ndarray,
    curr: np.ndarray,
    lam: float = 5.0,
    epsilon: float = 0.5,
    canny_low: float = 0.1,
    canny_high: float = 0.3,
    estimator=None,
) -> SaliencyResult:
    """Run flow, contour, static saliency, refinement, score and segmentation on one frame pair."""
    flow = dense_flow(prev, curr, estimator)
    contour = motion_contour(flow, canny_low, canny_high)
    static = static_saliency(curr)
    refined = refine_flow(static, contour)
    score = saliency_score(refined, lam)
    seg = segment(refined, lam, epsilon)
    return SaliencyResult(flow, flow_to_hsv(flow), static, contour, refined, score, seg)
