"""Bit-exact reading and writing of slices, masks, manifests and weights.

Pixel files are binary PGM (P5, 8 or 16 bit, big-endian samples) or
single-channel PNG.  Physical spacing lives in a plain ``key=value``
manifest next to the images, never in the pixel files.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (ArchitectureError, FormatError, GeometryError, IntegrityError,
                     InvalidMaskError)

DEFAULT_SPACING = (0.9, 0.9, 6.0)  # spacing_x, spacing_y, slice_thickness in mm
N_CLASSES = 4
CLASS_NAMES = ("background", "ventricle", "normal_wmh", "abnormal_wmh")


@dataclass
class Slice:
    pixels: np.ndarray
    spacing_x: float = DEFAULT_SPACING[0]
    spacing_y: float = DEFAULT_SPACING[1]
    slice_thickness: float = DEFAULT_SPACING[2]
    case_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise GeometryError(f"slice pixels must be a non-empty 2-D array, got shape {px.shape}")
        if min(self.spacing_x, self.spacing_y, self.slice_thickness) <= 0:
            raise GeometryError("spacing values must be > 0")
        if self.slice_index < 0:
            raise GeometryError("slice_index must be >= 0")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.spacing_x, self.spacing_y, self.slice_thickness)

    def with_pixels(self, pixels: np.ndarray) -> "Slice":
        return replace(self, pixels=pixels)


@dataclass
class ClassMask:
    labels: np.ndarray
    spacing_x: float = DEFAULT_SPACING[0]
    spacing_y: float = DEFAULT_SPACING[1]
    slice_thickness: float = DEFAULT_SPACING[2]
    case_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise GeometryError(f"mask must be 2-D, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= N_CLASSES):
            raise InvalidMaskError(f"mask labels must lie in 0..{N_CLASSES - 1}, found {lab.min()}..{lab.max()}")
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.all(lab == np.round(lab)):
                raise InvalidMaskError("mask labels must be integers")
        self.labels = lab.astype(np.uint8)

    def __eq__(self, other):
        if not isinstance(other, ClassMask):
            return NotImplemented
        return (np.array_equal(self.labels, other.labels)
                and (self.spacing_x, self.spacing_y, self.slice_thickness, self.case_id, self.slice_index)
                == (other.spacing_x, other.spacing_y, other.slice_thickness, other.case_id, other.slice_index))

    @property
    def shape(self):
        return self.labels.shape


# -- PGM / PNG ----------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _read_pgm(data: bytes, path) -> np.ndarray:
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic != b"P5":
        raise FormatError(f"{path}: unsupported PGM magic {magic!r} (only binary P5)")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if not (0 < maxval < 65536) or w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid PGM dimensions or maxval")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * dtype.itemsize
    payload = data[pos:pos + n]
    if len(payload) != n:
        raise IntegrityError(f"{path}: PGM payload has {len(payload)} bytes, expected {n}")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(dtype.newbyteorder("="))


def read_image(path) -> np.ndarray:
    """Raw integer pixel array from a PGM (P5) or grayscale PNG."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    data = path.read_bytes()
    if data[:2] == b"P5":
        return _read_pgm(data, path)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "I;16", "I;16B", "I"):
                bands = len(im.getbands())
                raise FormatError(f"{path}: PNG must be single-channel grayscale, got mode {im.mode} "
                                  f"with {bands} channel(s)")
            arr = np.array(im)
        if arr.ndim != 2:
            raise FormatError(f"{path}: PNG must be single-channel, got {arr.shape[2]} channels")
        return arr if arr.dtype == np.uint8 else arr.astype(np.uint16)
    raise FormatError(f"{path}: unsupported format (expected PGM P5 or PNG)")


def write_pgm(path, pixels: np.ndarray, bits: int | None = None) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise GeometryError("PGM images are 2-D")
    if bits is None:
        bits = 8 if pixels.max(initial=0) < 256 else 16
    if bits == 8:
        payload, maxval = pixels.astype(np.uint8), 255
    elif bits == 16:
        payload, maxval = pixels.astype(">u2"), 65535
    else:
        raise ValueError("bits must be 8 or 16")
    if pixels.size and (pixels.min() < 0 or pixels.max() > maxval):
        raise ValueError(f"pixel values out of range for {bits}-bit PGM")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(payload.tobytes())


# -- manifests ----------------------------------------------------------------

@dataclass
class SliceEntry:
    slice_index: int
    image: Path | None
    mask: Path | None = None


@dataclass
class CaseManifest:
    """One case: spacing plus an ordered list of slice files.

    Text form, one ``key=value`` per line::

        case_id=case_0003
        spacing_x=0.9
        spacing_y=0.9
        slice_thickness=6
        slice=0 image=img_000.pgm mask=mask_000.pgm

    Paths are relative to the manifest's directory.
    """

    case_id: str
    entries: list[SliceEntry] = field(default_factory=list)
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    root: Path = Path(".")

    def sorted_entries(self) -> list[SliceEntry]:
        return sorted(self.entries, key=lambda e: e.slice_index)

    def resolve(self, rel: Path | None) -> Path | None:
        return None if rel is None else self.root / rel


def write_manifest(m: CaseManifest, path) -> None:
    path = Path(path)
    indices = [e.slice_index for e in m.entries]
    if len(set(indices)) != len(indices):
        raise FormatError(f"duplicate slice_index in manifest for {m.case_id}")
    lines = [f"case_id={m.case_id}",
             f"spacing_x={m.spacing[0]!r}",
             f"spacing_y={m.spacing[1]!r}",
             f"slice_thickness={m.spacing[2]!r}"]
    for e in m.sorted_entries():
        parts = [f"slice={e.slice_index}"]
        if e.image is not None:
            parts.append(f"image={Path(e.image).as_posix()}")
        if e.mask is not None:
            parts.append(f"mask={Path(e.mask).as_posix()}")
        lines.append(" ".join(parts))
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> CaseManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    info: dict[str, str] = {}
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        if key == "slice":
            idx, *rest = value.split()
            fields = {}
            for item in rest:
                k, s2, v = item.partition("=")
                if not s2 or k not in ("image", "mask"):
                    raise FormatError(f"{path}:{lineno}: bad slice field {item!r}")
                fields[k] = Path(v)
            entries.append(SliceEntry(int(idx), fields.get("image"), fields.get("mask")))
        elif key in ("case_id", "spacing_x", "spacing_y", "slice_thickness"):
            info[key] = value.strip()
        else:
            raise FormatError(f"{path}:{lineno}: unknown manifest key {key!r}")
    indices = [e.slice_index for e in entries]
    if len(set(indices)) != len(indices):
        raise FormatError(f"{path}: duplicate slice_index")
    spacing = (float(info.get("spacing_x", DEFAULT_SPACING[0])),
               float(info.get("spacing_y", DEFAULT_SPACING[1])),
               float(info.get("slice_thickness", DEFAULT_SPACING[2])))
    case_id = info.get("case_id", path.parent.name)
    return CaseManifest(case_id, sorted(entries, key=lambda e: e.slice_index), spacing, path.parent)


def _sidecar_manifest(path: Path) -> tuple[CaseManifest, SliceEntry] | None:
    mpath = path.parent / "manifest.txt"
    if not mpath.exists():
        return None
    m = read_manifest(mpath)
    for e in m.entries:
        for p in (e.image, e.mask):
            if p is not None and (m.root / p).resolve() == path.resolve():
                return m, e
    return None


def load_slice(path, spacing=None, case_id: str | None = None, slice_index: int | None = None) -> Slice:
    """Read one slice; spacing comes from ``spacing``, else a sidecar
    ``manifest.txt`` listing the file, else the 0.9 x 0.9 x 6 mm default."""
    path = Path(path)
    px = read_image(path)
    found = _sidecar_manifest(path) if spacing is None else None
    if found is not None:
        m, e = found
        spacing = m.spacing
        case_id = m.case_id if case_id is None else case_id
        slice_index = e.slice_index if slice_index is None else slice_index
    sx, sy, st = spacing or DEFAULT_SPACING
    return Slice(px, sx, sy, st, case_id or path.stem, slice_index or 0)


def load_mask(path, spacing=None, case_id: str = "", slice_index: int = 0) -> ClassMask:
    px = read_image(path)
    sx, sy, st = spacing or DEFAULT_SPACING
    return ClassMask(px, sx, sy, st, case_id, slice_index)


def save_mask(mask: ClassMask, path) -> None:
    """8-bit PGM with the raw labels 0..3."""
    if not isinstance(mask, ClassMask):
        mask = ClassMask(mask)
    lab = mask.labels
    if lab.max(initial=0) >= N_CLASSES:
        raise InvalidMaskError("mask label out of range")
    write_pgm(path, lab, bits=8)


def load_case(manifest: CaseManifest | str | os.PathLike):
    """Return ``(slices, masks)`` sorted by slice_index; masks may be None."""
    if not isinstance(manifest, CaseManifest):
        manifest = read_manifest(manifest)
    slices, masks = [], []
    for e in manifest.sorted_entries():
        slices.append(load_slice(manifest.resolve(e.image), manifest.spacing, manifest.case_id, e.slice_index)
                      if e.image is not None else None)
        masks.append(load_mask(manifest.resolve(e.mask), manifest.spacing, manifest.case_id, e.slice_index)
                     if e.mask is not None else None)
    return slices, masks


def save_paired(input_img: np.ndarray, target_img: np.ndarray, path) -> None:
    """Side-by-side 256x512 composite (input left), 16-bit PGM scaled from [0, 1]."""
    a, b = np.asarray(input_img, dtype=np.float64), np.asarray(target_img, dtype=np.float64)
    if a.shape != (256, 256) or b.shape != (256, 256):
        raise GeometryError(f"paired halves must both be 256x256, got {a.shape} and {b.shape}")
    both = np.concatenate([a, b], axis=1)
    if both.min() < 0 or both.max() > 1:
        raise ValueError("paired images must lie in [0, 1]")
    write_pgm(path, np.rint(both * 65535).astype(np.uint16), bits=16)


def load_paired(path) -> tuple[np.ndarray, np.ndarray]:
    px = read_image(path).astype(np.float64) / 65535
    if px.shape[1] % 2:
        raise GeometryError("paired composite must have an even width")
    w = px.shape[1] // 2
    return px[:, :w], px[:, w:]


# -- weights ------------------------------------------------------------------

WEIGHTS_MAGIC = "WMHSEG-WEIGHTS"
WEIGHTS_VERSION = 1


def save_weights(model, path) -> None:
    """Text header (version, architecture JSON, one line per tensor) then
    the tensors as little-endian float32 in header order."""
    arrays = model.state_arrays()
    header = [f"{WEIGHTS_MAGIC} v{WEIGHTS_VERSION}",
              "arch " + json.dumps(model.arch.to_dict(), sort_keys=True),
              "meta " + json.dumps(model.meta, sort_keys=True),
              f"tensors {len(arrays)}"]
    for name, a in arrays.items():
        header.append(f"{name} {','.join(str(d) for d in a.shape)}")
    header.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _parse_shape(text: str) -> tuple[int, ...]:
    return tuple(int(d) for d in text.split(",")) if text else ()


def load_weights(path, expect=None):
    """Rebuild a :class:`GanModel` from a weights file.

    ``expect`` (an ``ArchSpec``) makes a layout mismatch an error instead
    of silently building whatever the file describes.
    """
    from .nncore.nets import ArchSpec, GanModel

    data = Path(path).read_bytes()
    lines = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise IntegrityError(f"{path}: truncated weights header")
        line = data[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        lines.append(line)
        if line == "end":
            break
        if len(lines) > 100_000:
            raise IntegrityError(f"{path}: weights header has no end marker")
    if not lines[0].startswith(WEIGHTS_MAGIC):
        raise FormatError(f"{path}: not a weights file")
    version = lines[0].split()[-1]
    if version != f"v{WEIGHTS_VERSION}":
        raise FormatError(f"{path}: unsupported weights version {version}")
    try:
        arch = ArchSpec.from_dict(json.loads(lines[1].removeprefix("arch ")))
        meta = json.loads(lines[2].removeprefix("meta "))
        n = int(lines[3].split()[1])
        shapes = [(ln.split(" ")[0], _parse_shape(ln.split(" ")[1])) for ln in lines[4:4 + n]]
    except (ValueError, KeyError, IndexError) as exc:
        raise FormatError(f"{path}: malformed weights header") from exc
    if expect is not None and arch != expect:
        raise ArchitectureError(
            f"{path}: stored architecture {arch.to_dict()} does not match expected {expect.to_dict()}")

    model = GanModel.build(arch)
    model.meta = meta
    target = model.state_arrays()
    declared = dict(shapes)
    if set(declared) != set(target):
        missing = sorted(set(target) - set(declared))[:3]
        extra = sorted(set(declared) - set(target))[:3]
        raise ArchitectureError(f"{path}: tensor names differ from architecture (missing {missing}, extra {extra})")
    for name, shape in shapes:
        if target[name].shape != shape:
            raise ArchitectureError(
                f"{path}: tensor {name} has shape {shape}, architecture needs {target[name].shape}")
    need = sum(int(np.prod(s)) for _, s in shapes) * 4
    if len(data) - pos != need:
        raise IntegrityError(f"{path}: weights payload has {len(data) - pos} bytes, expected {need}")
    for name, shape in shapes:
        count = int(np.prod(shape))
        values = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        target[name][...] = values.reshape(shape)
        pos += count * 4
    return model
