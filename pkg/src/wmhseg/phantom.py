"""Seeded FLAIR-like phantoms with exact four-class ground truth.

Each slice is a bright-rimmed head ellipse containing brain tissue, two
mirrored dark ventricle lobes, bright normal-WMH caps confined to the
periventricular band at the lobe tips, and bright round abnormal lesions
elsewhere in the white matter.  Labels are painted together with the
intensities, so they agree exactly before noise is added.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .imgio import (CaseManifest, ClassMask, Slice, SliceEntry, save_mask, write_manifest,
                    write_pgm, DEFAULT_SPACING)
from .postproc import periventricular_band


class GenerationError(DataError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    rng_seed: int = 0
    size: int = 256
    slices_per_case: int = 10
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    # head geometry, semi-axes in pixels (rows, cols)
    brain_axes_rows: tuple[float, float] = (92.0, 106.0)
    brain_axes_cols: tuple[float, float] = (74.0, 86.0)
    skull_gap: float = 4.0
    skull_thickness: float = 6.0
    # one ventricle lobe; the other is its mirror image across the midline
    ventricle_offset_cols: tuple[float, float] = (9.0, 14.0)
    ventricle_offset_rows: tuple[float, float] = (-6.0, 6.0)
    ventricle_axis_long: tuple[float, float] = (20.0, 30.0)
    ventricle_axis_short: tuple[float, float] = (6.0, 9.0)
    ventricle_tilt_deg: tuple[float, float] = (4.0, 16.0)
    band_radius: int = 4
    # fraction of the lobe half-length beyond which band pixels form a cap
    cap_start: tuple[float, float] = (0.35, 0.6)
    cap_probability: float = 0.9
    lesion_count: tuple[int, int] = (2, 10)
    lesion_radius: tuple[float, float] = (2.0, 8.0)
    lesion_tip_fraction: float = 0.5
    lesion_tip_spread: float = 25.0
    lesion_clearance: float = 2.0
    # intensities: (mean, between-case sd)
    background: tuple[float, float] = (20.0, 4.0)
    tissue: tuple[float, float] = (450.0, 25.0)
    ventricle: tuple[float, float] = (120.0, 15.0)
    wmh: tuple[float, float] = (800.0, 30.0)
    skull_rim: float = 950.0
    noise_sd: float = 15.0

    def __post_init__(self):
        if not (self.ventricle[0] < self.tissue[0] < self.wmh[0] <= self.skull_rim):
            raise ConfigError("intensity ordering must be ventricle < tissue < wmh <= skull_rim")
        sds = (self.background[1], self.tissue[1], self.ventricle[1], self.wmh[1], self.noise_sd)
        if min(sds) < 0:
            raise ConfigError("standard deviations must be >= 0")
        if self.lesion_count[0] < 0 or self.lesion_count[1] < self.lesion_count[0]:
            raise ConfigError("lesion_count must be a non-negative (lo, hi) range")
        if self.size < 16 or self.slices_per_case < 1:
            raise ConfigError("size must be >= 16 and slices_per_case >= 1")

    @classmethod
    def compact(cls, size: int = 64, **overrides) -> "PhantomConfig":
        """Small-frame preset: anatomy scaled down but lesions and bands kept
        a few pixels thick so they stay resolvable."""
        s = size / 64
        base = cls(
            size=size, spacing=(0.9 * 256 / size, 0.9 * 256 / size, 6.0),
            brain_axes_rows=(24 * s, 27 * s), brain_axes_cols=(19.5 * s, 22 * s),
            skull_gap=1.5 * s, skull_thickness=2.0 * s,
            ventricle_offset_cols=(3.5 * s, 5.0 * s), ventricle_offset_rows=(-2 * s, 2 * s),
            ventricle_axis_long=(7 * s, 10 * s), ventricle_axis_short=(2.5 * s, 3.5 * s),
            band_radius=max(2, round(2 * s)), lesion_count=(2, 6),
            lesion_radius=(1.8 * s, 3.2 * s), lesion_tip_spread=7 * s,
            lesion_clearance=1.5 * s)
        return replace(base, **overrides)


def _ellipse(rr, cc, r0, c0, a, b, theta=0.0):
    u = (rr - r0) * math.cos(theta) + (cc - c0) * math.sin(theta)
    v = -(rr - r0) * math.sin(theta) + (cc - c0) * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0, u / a


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _paint_slice(cfg: PhantomConfig, rng: np.random.Generator, case: dict, k: int):
    n = cfg.size
    rr, cc = np.indices((n, n), dtype=np.float64)
    r0 = c0 = (n - 1) / 2
    # anatomy grows towards the middle of the stack
    phase = math.sin(math.pi * (k + 0.5) / cfg.slices_per_case)
    f_brain = 0.9 + 0.1 * phase
    f_vent = 0.55 + 0.45 * phase

    a, b = case["brain_a"] * f_brain, case["brain_b"] * f_brain
    brain, _ = _ellipse(rr, cc, r0, c0, a, b)
    g, t = cfg.skull_gap, cfg.skull_thickness
    rim_outer, _ = _ellipse(rr, cc, r0, c0, a + g + t, b + g + t)
    rim_inner, _ = _ellipse(rr, cc, r0, c0, a + g, b + g)
    rim = rim_outer & ~rim_inner

    vent = np.zeros((n, n), dtype=bool)
    tips = []
    caps = np.zeros((n, n), dtype=bool)
    long_ax = case["vent_long"] * f_vent
    short_ax = max(case["vent_short"] * math.sqrt(f_vent), 1.0)
    for side in (-1, 1):
        vc = c0 + side * case["vent_dc"]
        vr = r0 + case["vent_dr"]
        theta = side * case["vent_tilt"]
        lobe, axial = _ellipse(rr, cc, vr, vc, long_ax, short_ax, theta)
        vent |= lobe
        lobe_band = periventricular_band(lobe, cfg.band_radius)
        for end in (-1, 1):
            tips.append((vr + end * long_ax * math.cos(theta), vc + end * long_ax * math.sin(theta)))
            if rng.random() < cfg.cap_probability:
                start = _uniform(rng, cfg.cap_start)
                caps |= lobe_band & (end * axial > start)
    band = periventricular_band(vent, cfg.band_radius)
    normal = band & caps & brain

    # keep lesions clear of the ventricles, the band and each other
    forbidden = np.zeros((n, n), dtype=bool)
    forbidden |= vent | band
    lo, hi = cfg.lesion_count
    count = int(rng.integers(lo, hi + 1))
    lesions = np.zeros((n, n), dtype=bool)
    inside, _ = _ellipse(rr, cc, r0, c0, a - 1.5, b - 1.5)
    for _ in range(count):
        placed = False
        for _attempt in range(2000):
            rad = _uniform(rng, cfg.lesion_radius)
            if rng.random() < cfg.lesion_tip_fraction and tips:
                tr, tc = tips[int(rng.integers(len(tips)))]
                cr = tr + rng.normal(0, cfg.lesion_tip_spread)
                ccen = tc + rng.normal(0, cfg.lesion_tip_spread)
            else:
                cr = rng.uniform(r0 - a, r0 + a)
                ccen = rng.uniform(c0 - b, c0 + b)
            blob = (rr - cr) ** 2 + (cc - ccen) ** 2 <= rad * rad
            if not blob.any():
                continue
            halo = (rr - cr) ** 2 + (cc - ccen) ** 2 <= (rad + cfg.lesion_clearance) ** 2
            if np.any(halo & forbidden) or np.any(blob & ~inside):
                continue
            lesions |= blob
            forbidden |= halo
            placed = True
            break
        if not placed:
            raise GenerationError(f"could not place {count} lesions in case {case['case_id']} slice {k}")

    labels = np.zeros((n, n), dtype=np.uint8)
    labels[brain & vent] = 1
    labels[normal] = 2
    labels[lesions] = 3

    img = np.full((n, n), case["bg"])
    img[rim] = cfg.skull_rim
    img[brain] = case["tissue"]
    img[labels == 1] = case["vent"]
    img[(labels == 2) | (labels == 3)] = case["wmh"]
    return img, labels


def generate_case(cfg: PhantomConfig, case_seed: int, case_id: str | None = None,
                  return_clean: bool = False):
    """Return ``(slices, masks)`` for one case, deterministic in (cfg, case_seed).

    With ``return_clean`` a third list holds the noise-free painted images.
    """
    rng = np.random.default_rng([cfg.rng_seed, case_seed])
    case_id = case_id or f"case_{case_seed:04d}"
    tilt = math.radians(_uniform(rng, cfg.ventricle_tilt_deg))
    case = {
        "case_id": case_id,
        "brain_a": _uniform(rng, cfg.brain_axes_rows),
        "brain_b": _uniform(rng, cfg.brain_axes_cols),
        "vent_dc": _uniform(rng, cfg.ventricle_offset_cols),
        "vent_dr": _uniform(rng, cfg.ventricle_offset_rows),
        "vent_long": _uniform(rng, cfg.ventricle_axis_long),
        "vent_short": _uniform(rng, cfg.ventricle_axis_short),
        "vent_tilt": tilt,
        "bg": max(rng.normal(*cfg.background), 0.0),
        "tissue": rng.normal(*cfg.tissue),
        "vent": max(rng.normal(*cfg.ventricle), 0.0),
        "wmh": rng.normal(*cfg.wmh),
    }
    case["wmh"] = min(max(case["wmh"], case["tissue"] + 1), cfg.skull_rim)
    case["vent"] = min(case["vent"], case["tissue"] - 1)
    sx, sy, st = cfg.spacing
    slices, masks, clean = [], [], []
    for k in range(cfg.slices_per_case):
        img, labels = _paint_slice(cfg, rng, case, k)
        noisy = img + rng.normal(0.0, cfg.noise_sd, img.shape) if cfg.noise_sd > 0 else img.copy()
        noisy = np.clip(np.rint(noisy), 0, 65535).astype(np.uint16)
        slices.append(Slice(noisy, sx, sy, st, case_id, k))
        masks.append(ClassMask(labels, sx, sy, st, case_id, k))
        clean.append(img)
    if return_clean:
        return slices, masks, clean
    return slices, masks


def split_cases(case_ids: list[str], train_fraction: float = 0.7) -> tuple[list[str], list[str]]:
    """Case-level split in sorted case_id order; both sides non-empty."""
    ids = sorted(set(case_ids))
    n = len(ids)
    n_train = int(round(train_fraction * n))
    if n < 2 or n_train < 1 or n_train >= n:
        raise ConfigError(f"cannot split {n} case(s) at fraction {train_fraction} into two non-empty sets")
    return ids[:n_train], ids[n_train:]


@dataclass
class DatasetPaths:
    root: Path
    case_manifests: dict[str, Path]
    train_list: Path
    test_list: Path


def write_case(out_dir: Path, slices, masks) -> Path:
    """Write one case as 16-bit image PGMs, 8-bit mask PGMs and a manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s, m in zip(slices, masks):
        img_name = f"img_{s.slice_index:03d}.pgm"
        write_pgm(out_dir / img_name, s.pixels, bits=16)
        mask_name = None
        if m is not None:
            mask_name = f"mask_{s.slice_index:03d}.pgm"
            save_mask(m, out_dir / mask_name)
        entries.append(SliceEntry(s.slice_index, Path(img_name), Path(mask_name) if mask_name else None))
    manifest = CaseManifest(slices[0].case_id, entries, slices[0].spacing, out_dir)
    path = out_dir / "manifest.txt"
    write_manifest(manifest, path)
    return path


def generate_dataset(cfg: PhantomConfig, n_cases: int, out_dir, train_fraction: float = 0.7) -> DatasetPaths:
    """Write ``n_cases`` phantom cases plus ``train.txt`` / ``test.txt`` lists
    of case manifest paths (relative to ``out_dir``)."""
    if n_cases < 2:
        raise ConfigError("need at least 2 cases to form a train/test split")
    out_dir = Path(out_dir)
    ids = [f"case_{i:04d}" for i in range(n_cases)]
    train_ids, test_ids = split_cases(ids, train_fraction)
    manifests = {}
    for i, cid in enumerate(ids):
        slices, masks = generate_case(cfg, i, cid)
        manifests[cid] = write_case(out_dir / "cases" / cid, slices, masks)
    train_list, test_list = out_dir / "train.txt", out_dir / "test.txt"
    for path, group in ((train_list, train_ids), (test_list, test_ids)):
        path.write_text("".join(f"{manifests[c].relative_to(out_dir).as_posix()}\n" for c in group))
    return DatasetPaths(out_dir, manifests, train_list, test_list)


def read_case_list(path) -> list[Path]:
    path = Path(path)
    return [path.parent / line.strip() for line in path.read_text().splitlines() if line.strip()]
