"""Slice preprocessing: denoise, brain extraction, per-slice intensity
normalisation and brain-filling resampling onto the network frame."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GeometryError, NoBrainFoundError, NormalizationError
from .imgio import ClassMask, Slice

ANCHORS = (0.0, 0.25, 0.75, 1.0)

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PreprocConfig:
    median_kernel: int = 3
    gaussian_sigma: float = 1.0
    brain_threshold_method: str = "otsu"
    # used only with method "fixed": threshold = fraction * max intensity
    brain_threshold_fraction: float = 0.1
    min_component_area: int = 64
    target_size: int = 256
    fill_margin: float = 0.02

    def __post_init__(self):
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError("median_kernel must be odd and >= 1")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be > 0")
        if not 0 <= self.fill_margin < 0.5:
            raise ValueError("fill_margin must lie in [0, 0.5)")
        if self.brain_threshold_method not in ("otsu", "fixed"):
            raise ValueError("brain_threshold_method must be 'otsu' or 'fixed'")
        if self.target_size < 1:
            raise ValueError("target_size must be positive")


@dataclass(frozen=True)
class BrainMask:
    mask: np.ndarray
    threshold: float


@dataclass(frozen=True)
class NormalizationParams:
    i_min: float
    i_max: float

    def __post_init__(self):
        if not self.i_max > self.i_min:
            raise NormalizationError(f"degenerate normalisation range: i_max={self.i_max} <= i_min={self.i_min}")


@dataclass(frozen=True)
class AffineTransform:
    """Source (row, col) -> frame (row, col) as a 2x3 matrix ``[A | t]``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise GeometryError("affine matrix must be 2x3")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def scale_translate(cls, scale: float, t_row: float, t_col: float) -> "AffineTransform":
        return cls(np.array([[scale, 0.0, t_row], [0.0, scale, t_col]]))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls.scale_translate(1.0, 0.0, 0.0)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:, 2]

    def is_invertible(self) -> bool:
        return abs(np.linalg.det(self.linear)) > 1e-12

    def inverse(self) -> "AffineTransform":
        if not self.is_invertible():
            raise GeometryError("affine transform is not invertible")
        inv = np.linalg.inv(self.linear)
        return AffineTransform(np.hstack([inv, (-inv @ self.offset)[:, None]]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (..., 2) array of (row, col) points."""
        return points @ self.linear.T + self.offset


def warp(image: np.ndarray, t: AffineTransform, out_shape, order: int) -> np.ndarray:
    """Resample ``image`` so that ``out[p] = image[t^-1(p)]``; outside -> 0."""
    inv = t.inverse()
    out = ndimage.affine_transform(
        np.asarray(image, dtype=np.float64), inv.linear, offset=inv.offset,
        output_shape=tuple(out_shape), order=order, mode="constant", cval=0.0,
        prefilter=False)
    return out


def denoise(s: Slice, cfg: PreprocConfig = PreprocConfig()) -> Slice:
    """Median filter then Gaussian blur, both with replicated borders."""
    px = np.asarray(s.pixels, dtype=np.float64)
    px = ndimage.median_filter(px, size=cfg.median_kernel, mode="nearest")
    radius = int(math.ceil(3 * cfg.gaussian_sigma))
    px = ndimage.gaussian_filter(px, cfg.gaussian_sigma, mode="nearest", radius=radius)
    return s.with_pixels(px)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return float(lo)
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = s0 / np.maximum(w0, 1)
    m1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


def foreground_threshold(px: np.ndarray, cfg: PreprocConfig) -> float:
    if cfg.brain_threshold_method == "fixed":
        return float(cfg.brain_threshold_fraction * px.max())
    return otsu_threshold(px)


def remove_small_components(mask: np.ndarray, min_area: int, structure=EIGHT) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return mask.copy()
    areas = np.bincount(labels.ravel())
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def largest_component(mask: np.ndarray, structure=EIGHT) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return mask.copy()
    areas = np.bincount(labels.ravel())
    areas[0] = 0
    return labels == int(np.argmax(areas))


def moment_ellipse(mask: np.ndarray) -> np.ndarray:
    """Rasterise the ellipse with the same centroid and second moments.

    Semi-axes are twice the square roots of the covariance eigenvalues, which
    reproduces a uniformly filled ellipse exactly.
    """
    rows, cols = np.nonzero(mask)
    r0, c0 = rows.mean(), cols.mean()
    dr, dc = rows - r0, cols - c0
    mu_rr, mu_cc, mu_rc = (dr * dr).mean(), (dc * dc).mean(), (dr * dc).mean()
    # orientation of the major axis, measured from the row axis
    theta = 0.5 * math.atan2(2 * mu_rc, mu_rr - mu_cc)
    common = math.sqrt(((mu_rr - mu_cc) / 2) ** 2 + mu_rc ** 2)
    lam1 = (mu_rr + mu_cc) / 2 + common
    lam2 = max((mu_rr + mu_cc) / 2 - common, 0.0)
    a = 2 * math.sqrt(lam1) + 0.5
    b = 2 * math.sqrt(lam2) + 0.5
    rr, cc = np.indices(mask.shape, dtype=np.float64)
    u = (rr - r0) * math.cos(theta) + (cc - c0) * math.sin(theta)
    v = -(rr - r0) * math.sin(theta) + (cc - c0) * math.cos(theta)
    return (u / a) ** 2 + (v / max(b, 1e-9)) ** 2 <= 1.0


def extract_brain(s: Slice, cfg: PreprocConfig = PreprocConfig()) -> BrainMask:
    """Threshold, drop specks, fit the moment ellipse, refine with the
    filled largest foreground component."""
    px = np.asarray(s.pixels, dtype=np.float64)
    if not np.any(px > 0):
        raise NoBrainFoundError(f"no brain found in {s.case_id}[{s.slice_index}]: image is all zero")
    thr = foreground_threshold(px, cfg)
    fg = px > thr
    fg = remove_small_components(fg, cfg.min_component_area)
    if not fg.any():
        raise NoBrainFoundError(f"no brain found in {s.case_id}[{s.slice_index}]: nothing above threshold {thr:g}")
    core = largest_component(fg)
    ellipse = moment_ellipse(core)
    filled = ndimage.binary_fill_holes(core)
    brain = largest_component(ellipse & filled)
    if not brain.any():
        raise NoBrainFoundError(f"no brain found in {s.case_id}[{s.slice_index}]")
    return BrainMask(brain, thr)


def compute_norm_params(s: Slice, brain: BrainMask, percentile: float = 99.0) -> NormalizationParams:
    """Background mean and high percentile of the peripheral (non-brain,
    above-threshold) pixels."""
    px = np.asarray(s.pixels, dtype=np.float64)
    if brain.mask.shape != px.shape:
        raise GeometryError("brain mask does not match slice geometry")
    outside = ~brain.mask
    background = outside & (px <= brain.threshold)
    peripheral = outside & (px > brain.threshold)
    i_min = float(px[background].mean()) if background.any() else float(px.min())
    if peripheral.any():
        i_max = float(np.percentile(px[peripheral], percentile))
    else:
        i_max = float(np.percentile(px, percentile))
    return NormalizationParams(i_min, i_max)


def normalize(s: Slice, params: NormalizationParams) -> Slice:
    px = (np.asarray(s.pixels, dtype=np.float64) - params.i_min) / (params.i_max - params.i_min)
    return s.with_pixels(np.clip(px, 0.0, 1.0))


def frame_transform(brain: np.ndarray, cfg: PreprocConfig) -> AffineTransform:
    """Uniform scale + shift placing the brain bounding box in the central
    ``(1 - 2*margin)`` part of the square output frame."""
    rows, cols = np.nonzero(brain)
    if rows.size == 0:
        raise GeometryError("empty brain mask: nothing to fit to the frame")
    r_lo, r_hi, c_lo, c_hi = rows.min(), rows.max(), cols.min(), cols.max()
    extent = max(r_hi - r_lo + 1, c_hi - c_lo + 1)
    size = cfg.target_size
    scale = (1 - 2 * cfg.fill_margin) * size / extent
    centre = (size - 1) / 2
    return AffineTransform.scale_translate(
        scale, centre - scale * (r_lo + r_hi) / 2, centre - scale * (c_lo + c_hi) / 2)


def fit_to_frame(s: Slice, brain: BrainMask, cfg: PreprocConfig = PreprocConfig()):
    """Return ``(frame_image, transform)``; bilinear, zero outside the source."""
    t = frame_transform(brain.mask, cfg)
    img = warp(s.pixels, t, (cfg.target_size, cfg.target_size), order=1)
    return np.clip(img, 0.0, max(float(np.max(s.pixels)), 0.0)), t


def warp_labels(labels: np.ndarray, t: AffineTransform, out_shape) -> np.ndarray:
    """Nearest-neighbour warp for categorical maps."""
    return np.rint(warp(labels, t, out_shape, order=0)).astype(np.uint8)


def encode_target(mask: ClassMask | np.ndarray) -> np.ndarray:
    labels = mask.labels if isinstance(mask, ClassMask) else np.asarray(mask)
    return np.asarray(ANCHORS, dtype=np.float64)[labels]


@dataclass
class Prepared:
    """A slice ready for the network, plus what is needed to undo the framing."""

    frame: np.ndarray
    transform: AffineTransform
    norm: NormalizationParams
    brain: BrainMask
    native_shape: tuple[int, int]


def prepare_slice(s: Slice, cfg: PreprocConfig = PreprocConfig()) -> Prepared:
    den = denoise(s, cfg)
    brain = extract_brain(den, cfg)
    params = compute_norm_params(den, brain)
    norm = normalize(den, params)
    frame, t = fit_to_frame(norm, brain, cfg)
    return Prepared(frame, t, params, brain, (s.height, s.width))
