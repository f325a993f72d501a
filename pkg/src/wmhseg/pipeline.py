"""Glue between modules: training pairs from case manifests and per-slice
inference with stage timings."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, WmhSegError
from .imgio import ClassMask, Slice, load_case
from .nncore.nets import GanModel
from .nncore.train import TrainPair
from .postproc import (PostprocConfig, classes_from_probabilities, morphological_cleanup,
                       native_probabilities)
from .preproc import PreprocConfig, encode_target, prepare_slice, warp_labels

STAGES = ("preprocess", "inference", "postprocess")


class StageError(WmhSegError):
    """Wraps an error raised inside one pipeline stage."""

    def __init__(self, stage: str, case_id: str, slice_index: int, cause: Exception):
        super().__init__(f"{stage} failed on {case_id} slice {slice_index}: "
                         f"{type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def make_pair(s: Slice, mask: ClassMask, cfg: PreprocConfig) -> TrainPair:
    p = prepare_slice(s, cfg)
    labels = warp_labels(mask.labels, p.transform, p.frame.shape)
    return TrainPair(p.frame, encode_target(labels), s.case_id)


def pairs_from_manifests(manifests, cfg: PreprocConfig) -> list[TrainPair]:
    pairs = []
    for m in manifests:
        slices, masks = load_case(m)
        for s, mask in zip(slices, masks):
            if s is None or mask is None:
                raise DataError(f"{m}: slice {getattr(s, 'slice_index', '?')} lacks an image or a mask")
            pairs.append(make_pair(s, mask, cfg))
    if not pairs:
        raise DataError("no training slices found")
    return pairs


@dataclass
class SliceResult:
    mask: ClassMask
    probs: np.ndarray                     # (4, H, W) in native space
    timings: dict = field(default_factory=dict)


def infer_slice(model: GanModel, s: Slice, pcfg: PreprocConfig = PreprocConfig(),
                ppcfg: PostprocConfig = PostprocConfig()) -> SliceResult:
    """Full path for one slice.  Errors come back as :class:`StageError`
    naming the stage; the original exception is chained."""
    t = {}
    stage = "preprocess"
    try:
        t0 = time.perf_counter()
        prep = prepare_slice(s, pcfg)
        t1 = time.perf_counter()
        stage = "inference"
        out = model.predict(prep.frame)
        t2 = time.perf_counter()
        stage = "postprocess"
        probs = native_probabilities(out, prep.transform, prep.native_shape, ppcfg)
        geom = dict(spacing_x=s.spacing_x, spacing_y=s.spacing_y, slice_thickness=s.slice_thickness,
                    case_id=s.case_id, slice_index=s.slice_index)
        mask = morphological_cleanup(classes_from_probabilities(probs, **geom), ppcfg)
        probs = probs.astype(np.float32)
        t3 = time.perf_counter()
    except WmhSegError as e:
        raise StageError(stage, s.case_id, s.slice_index, e) from e
    t["preprocess"], t["inference"], t["postprocess"] = t1 - t0, t2 - t1, t3 - t2
    return SliceResult(mask, probs, t)
