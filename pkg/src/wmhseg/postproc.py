"""From raw generator output back to a cleaned four-class mask."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GeometryError
from .imgio import ClassMask
from .preproc import ANCHORS, AffineTransform, warp

EIGHT = np.ones((3, 3), dtype=bool)
FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class PostprocConfig:
    anchors: tuple[float, ...] = ANCHORS
    temperature: float = 0.05
    min_region_area: int = 3
    smoothing_radius: int = 1
    # later entries overwrite earlier ones when smoothing makes classes overlap
    paint_order: tuple[int, ...] = (2, 3, 1)
    max_passes: int = 8

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.anchors, self.anchors[1:])):
            raise ValueError("anchors must be strictly increasing")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.min_region_area < 0 or self.smoothing_radius < 0:
            raise ValueError("areas and radii must be non-negative")


def disk(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= radius * radius


def to_native(gen_out: np.ndarray, t: AffineTransform, native_dims) -> np.ndarray:
    """Undo the framing transform (bilinear); pixels with no frame source get 0.

    Leading axes are treated as channels and warped independently.
    """
    if not t.is_invertible():
        raise GeometryError("framing transform is not invertible")
    gen_out = np.asarray(gen_out)
    inv = t.inverse()
    if gen_out.ndim == 2:
        return warp(gen_out, inv, native_dims, order=1)
    flat = gen_out.reshape((-1,) + gen_out.shape[-2:])
    out = np.stack([warp(ch, inv, native_dims, order=1) for ch in flat])
    return out.reshape(gen_out.shape[:-2] + tuple(native_dims))


def _logits(img: np.ndarray, cfg: PostprocConfig) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    anchors = np.asarray(cfg.anchors, dtype=np.float64).reshape((-1,) + (1,) * img.ndim)
    return -np.abs(img[None] - anchors) / cfg.temperature


def decode_probabilities(img: np.ndarray, cfg: PostprocConfig = PostprocConfig()) -> np.ndarray:
    """Per-class probabilities, shape (n_classes, *img.shape): a softmax over
    negative distances to the class anchors."""
    z = _logits(img, cfg)
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def decode_classes(img: np.ndarray, cfg: PostprocConfig = PostprocConfig(), **geom) -> ClassMask:
    """Nearest anchor per pixel; exact midpoints go to the lower class."""
    labels = np.argmax(_logits(img, cfg), axis=0).astype(np.uint8)
    return ClassMask(labels, **geom)


def native_probabilities(gen_out: np.ndarray, t: AffineTransform, native_dims,
                         cfg: PostprocConfig = PostprocConfig()) -> np.ndarray:
    """Class probabilities decoded in frame space, then warped back one map
    at a time.

    Interpolating the scalar output instead would turn a background/abnormal
    edge (0 next to 1.0) into a ring of the intermediate anchors.  Pixels
    with no frame source are pure background.
    """
    probs = to_native(decode_probabilities(gen_out, cfg), t, native_dims)
    total = probs.sum(axis=0)
    probs[0] += np.clip(1.0 - total, 0.0, None)
    return probs / probs.sum(axis=0, keepdims=True)


def classes_from_probabilities(probs: np.ndarray, **geom) -> ClassMask:
    """Argmax over the class axis; ties go to the lower class."""
    return ClassMask(np.argmax(probs, axis=0).astype(np.uint8), **geom)


def _geom(mask: ClassMask) -> dict:
    return dict(spacing_x=mask.spacing_x, spacing_y=mask.spacing_y,
                slice_thickness=mask.slice_thickness, case_id=mask.case_id,
                slice_index=mask.slice_index)


def _drop_small(binary: np.ndarray, min_area: int) -> np.ndarray:
    if min_area <= 1:
        return binary
    lab, n = ndimage.label(binary, structure=EIGHT)
    if n == 0:
        return binary
    keep = np.bincount(lab.ravel()) >= min_area
    keep[0] = False
    return keep[lab]


def _fill_background_holes(binary: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Fill 4-connected holes of ``binary`` made only of background pixels."""
    holes = ndimage.binary_fill_holes(binary, structure=FOUR) & ~binary
    if not holes.any():
        return binary
    lab, n = ndimage.label(holes, structure=FOUR)
    pure = ndimage.minimum(background.astype(np.uint8), lab, index=np.arange(1, n + 1)).astype(bool)
    fill = np.concatenate([[False], pure])[lab]
    return binary | fill


def _cleanup_pass(labels: np.ndarray, cfg: PostprocConfig) -> np.ndarray:
    se = disk(cfg.smoothing_radius) if cfg.smoothing_radius > 0 else None
    background = labels == 0
    layers = {}
    for c in cfg.paint_order:
        b = labels == c
        if not b.any():
            continue
        b = _drop_small(b, cfg.min_region_area)
        b = _fill_background_holes(b, background)
        if se is not None:
            b = ndimage.binary_opening(b, structure=se)
            r = cfg.smoothing_radius
            # pad so the closing sees empty space beyond the edge instead of eroding there
            b = ndimage.binary_closing(np.pad(b, r), structure=se)[r:-r, r:-r]
        layers[c] = b
    out = np.zeros_like(labels)
    for c in cfg.paint_order:
        if c in layers:
            out[layers[c]] = c
    return out


def morphological_cleanup(mask: ClassMask, cfg: PostprocConfig = PostprocConfig()) -> ClassMask:
    """Per class: drop small 8-connected specks, fill background holes,
    open then close.  Repeated until nothing changes (at most
    ``cfg.max_passes`` times) so the result is a fixed point."""
    labels = mask.labels
    for _ in range(max(cfg.max_passes, 1)):
        new = _cleanup_pass(labels, cfg)
        if np.array_equal(new, labels):
            break
        labels = new
    return ClassMask(labels, **_geom(mask))


def periventricular_band(ventricle: np.ndarray, radius: int) -> np.ndarray:
    """Annulus around the ventricles: dilate(ventricle) minus ventricle.

    The structuring element is the disk of radius ``radius + 0.5``, i.e. the
    3x3 square for radius 1.
    """
    v = np.asarray(ventricle, dtype=bool)
    if radius <= 0 or not v.any():
        return np.zeros_like(v)
    return ndimage.binary_dilation(v, structure=disk(radius + 0.5)) & ~v
