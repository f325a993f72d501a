"""Acceptance suite: one recorded PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are
repeated in an "acceptance criteria" section at the end of the run.  The
training criteria (07-09) drive the command-line tool end to end and take
roughly ten minutes on one core.
"""
import csv
import json
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from oracles import enum_counts, finite_diff, hd95_bruteforce, layer_grad_errors, rel_err
from wmhseg.cli import main
from wmhseg.errors import UndefinedMetricError
from wmhseg.imgio import CaseManifest, ClassMask, SliceEntry, load_case, save_mask, save_weights, write_manifest
from wmhseg.metrics import confusion, dice, hd95, jaccard, pr_curve, precision, recall, roc_curve
from wmhseg.nncore import ops
from wmhseg.nncore.layers import BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, LeakyReLU, ReLU, Sigmoid, Tanh01
from wmhseg.nncore.losses import bce_with_logits, l1_loss
from wmhseg.nncore.nets import ArchSpec, GanModel, GeneratorNet
from wmhseg.phantom import PhantomConfig, generate_case, read_case_list
from wmhseg.postproc import PostprocConfig, classes_from_probabilities, decode_classes, native_probabilities
from wmhseg.preproc import encode_target, prepare_slice, warp_labels

F64 = np.float64


def pooled_dice(a, b):
    a, b = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b])
    return dice(a, b)


def random_mask_pair(rng, shape=(32, 32)):
    """Mix of speckle and rectangle unions so boundaries vary in shape."""
    def one():
        if rng.random() < 0.5:
            return rng.random(shape) < rng.uniform(0.01, 0.7)
        m = np.zeros(shape, bool)
        for _ in range(rng.integers(1, 5)):
            r, c = rng.integers(0, shape[0], 2)
            h, w = rng.integers(1, 14, 2)
            m[r:r + h, c:c + w] = True
        return m
    return one(), one()


# -- 01, 02 ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def metric_pairs():
    rng = np.random.default_rng(2024)
    return [random_mask_pair(rng) for _ in range(1000)]


def test_01_metric_oracle_equivalence(metric_pairs, criterion):
    t0 = time.perf_counter()
    mismatches, worst_hd = 0, 0.0
    for p, t in metric_pairs:
        tp, fp, fn, tn = enum_counts(p, t)
        want_p = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
        want_r = tp / (tp + fn) if tp + fn else (1.0 if fp == 0 else 0.0)
        want_d = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
        want_j = tp / (tp + fp + fn) if tp + fp + fn else 1.0
        c = confusion(p, t)
        got = (precision(c), recall(c), dice(p, t), jaccard(p, t))
        mismatches += got != (want_p, want_r, want_d, want_j)
        if p.any() and t.any():
            worst_hd = max(worst_hd, abs(hd95(p, t, (0.9, 0.9)) - hd95_bruteforce(p, t, (0.9, 0.9))))
        else:
            try:
                hd95(p, t)
                mismatches += 1
            except UndefinedMetricError:
                pass
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst_hd <= 1e-9 and elapsed <= 60
    criterion(1, "metric oracle equivalence", ok,
              f"{len(metric_pairs)} pairs, {mismatches} overlap mismatches, "
              f"max |hd95 - oracle| {worst_hd:.1e} mm, {elapsed:.1f} s (limit 60 s)")
    assert ok


def test_02_jaccard_dice_identity(metric_pairs, criterion):
    worst = max(abs(jaccard(p, t) - dice(p, t) / (2 - dice(p, t))) for p, t in metric_pairs)
    ok = worst <= 1e-12
    criterion(2, "JI = DSC/(2-DSC)", ok, f"max deviation {worst:.1e} over {len(metric_pairs)} pairs")
    assert ok


# -- 03, 04 ---------------------------------------------------------------------

def test_03_gradient_correctness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)

    def sign_safe(shape):
        x = rng.standard_normal(shape)
        return np.where(np.abs(x) < 1e-3, 1e-3, x)

    conv = Conv2d(2, 3, rng=rng, dtype=F64, init_std=0.5)
    conv.params["bias"][:] = rng.standard_normal(3)
    convt = ConvTranspose2d(3, 2, rng=rng, dtype=F64, init_std=0.5)
    convt.params["bias"][:] = rng.standard_normal(2)
    bn = BatchNorm2d(3, dtype=F64)
    bn.params["gamma"][:] = rng.random(3) + 0.5
    bn.params["beta"][:] = rng.standard_normal(3)
    drop = Dropout(0.5)
    gen = GeneratorNet(channels=(2, 3, 4, 4), rng=np.random.default_rng(9), dtype=F64)
    for name, p in gen.named_parameters():
        if name.endswith("weight"):
            p *= 10

    cases = {
        "conv2d": (conv, rng.standard_normal((2, 2, 6, 6)), None),
        "conv_transpose": (convt, rng.standard_normal((2, 3, 3, 3)), None),
        "batch_norm": (bn, rng.standard_normal((2, 3, 3, 4)) * 2 + 1, None),
        "leaky_relu": (LeakyReLU(0.2), sign_safe((2, 2, 4, 4)), None),
        "relu": (ReLU(), sign_safe((2, 2, 4, 4)), None),
        "tanh01": (Tanh01(), rng.standard_normal((2, 2, 4, 4)), None),
        "sigmoid": (Sigmoid(), rng.standard_normal((2, 2, 4, 4)), None),
        "dropout": (drop, rng.standard_normal((1, 2, 5, 5)),
                    lambda: setattr(drop, "rng", np.random.default_rng(11))),
        "mini_generator": (gen, rng.random((1, 1, 16, 16)),
                           lambda: gen.set_rng(np.random.default_rng(12))),
    }
    errors = {}
    for name, (layer, x, reseed) in cases.items():
        errors[name] = max(layer_grad_errors(layer, x, True, reseed).values())

    z = rng.standard_normal((2, 1, 3, 3)) * 3
    errors["bce"] = max(rel_err(bce_with_logits(z, lab)[1], finite_diff(lambda: bce_with_logits(z, lab)[0], z))
                        for lab in (0.0, 1.0))
    tgt = rng.random((1, 1, 6, 6))
    pred = tgt + sign_safe(tgt.shape) * 0.1
    errors["l1"] = rel_err(l1_loss(pred, tgt)[1], finite_diff(lambda: l1_loss(pred, tgt)[0], pred))

    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-6 and elapsed <= 120
    criterion(3, "gradient correctness (float64 finite differences)", ok,
              f"{len(errors)} checks, worst {worst} {errors[worst]:.1e} (limit 1e-6), "
              f"{elapsed:.1f} s (limit 120 s)")
    assert ok


def test_04_adjoint_property(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 4))
        pad = int(rng.integers(0, k))
        h, w = (int(v) for v in rng.integers(k, 12, 2))
        ci, co, n = (int(v) for v in rng.integers(1, 4, 3))
        x = rng.standard_normal((n, ci, h, w))
        wt = rng.standard_normal((co, ci, k, k))
        fx, _ = ops.conv2d(x, wt, None, stride, pad)
        y = rng.standard_normal(fx.shape)
        lhs = float((fx * y).sum())
        rhs = float((x * ops.conv2d_transpose(y, wt, None, stride, pad, output_size=(h, w))).sum())
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    ok = worst <= 1e-6
    criterion(4, "conv2d / conv2d_transpose adjoint", ok, f"100 random cases, max relative gap {worst:.1e}")
    assert ok


# -- 05, 06 ---------------------------------------------------------------------

def test_05_anchor_roundtrip(criterion):
    rng = np.random.default_rng(5)
    bad_roundtrip = bad_tau = 0
    taus = (1e-4, 0.05, 1.0)
    for _ in range(500):
        shape = tuple(int(v) for v in rng.integers(1, 40, 2))
        m = ClassMask(rng.integers(0, 4, shape).astype(np.uint8))
        bad_roundtrip += decode_classes(encode_target(m)) != m
        # arbitrary outputs, with exact midpoints mixed in to exercise ties
        img = rng.random(shape)
        img.ravel()[::7] = rng.choice([0.125, 0.5, 0.875], img.ravel()[::7].size)
        ref = decode_classes(img, PostprocConfig(temperature=taus[0])).labels
        bad_tau += any(not np.array_equal(decode_classes(img, PostprocConfig(temperature=t)).labels, ref)
                       for t in taus[1:])
    ok = bad_roundtrip == 0 and bad_tau == 0
    criterion(5, "anchor roundtrip and temperature invariance", ok,
              f"500 masks: {bad_roundtrip} roundtrip failures, {bad_tau} tau disagreements over {taus}")
    assert ok


def test_06_spatial_roundtrip(criterion):
    cfg = PhantomConfig()
    worst, n_checked = 1.0, 0
    for seed in range(5):
        slices, masks = generate_case(cfg, seed)
        for s, m in zip(slices, masks):
            p = prepare_slice(s)
            encoded = encode_target(warp_labels(m.labels, p.transform, p.frame.shape))
            back = classes_from_probabilities(native_probabilities(encoded, p.transform, m.shape)).labels
            for c in (1, 2, 3):
                if (m.labels == c).sum() >= 50:
                    worst = min(worst, dice(back == c, m.labels == c))
                    n_checked += 1
    ok = worst >= 0.95
    criterion(6, "frame -> native spatial roundtrip", ok,
              f"{n_checked} class/slice pairs on 50 phantom slices, min Dice {worst:.4f} (limit 0.95)")
    assert ok


# -- 07, 08, 09 -----------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """phantom -> train (twice, same seed) -> infer with the desk preset."""
    root = tmp_path_factory.mktemp("desk")
    common = ["--preset", "desk", "--seed", "0"]
    assert main(["phantom", *common, "--out", str(root / "data")]) == 0
    times = []
    for name in ("train_a", "train_b"):
        t0 = time.perf_counter()
        assert main(["train", *common, "--data", str(root / "data" / "train.txt"), "--out", str(root / name)]) == 0
        times.append(time.perf_counter() - t0)
    assert main(["infer", *common, "--weights", str(root / "train_a" / "weights.wts"),
                 "--data", str(root / "data" / "test.txt"), "--out", str(root / "pred")]) == 0
    return root, times


@pytest.mark.slow
def test_07_phantom_convergence(desk_run, criterion):
    root, times = desk_run
    train_slices = sum(len(load_case(p)[0]) for p in read_case_list(root / "data" / "train.txt"))
    preds, truths = {1: [], 2: [], 3: []}, {1: [], 2: [], 3: []}
    n_test = 0
    for manifest in read_case_list(root / "data" / "test.txt"):
        _, masks = load_case(manifest)
        case_id = masks[0].case_id
        _, pmasks = load_case(root / "pred" / case_id / "manifest.txt")
        for t, p in zip(masks, pmasks):
            n_test += 1
            for c in (1, 2, 3):
                truths[c].append(t.labels == c)
                preds[c].append(p.labels == c)
    d = {c: pooled_dice(preds[c], truths[c]) for c in (1, 2, 3)}
    limits = {1: 0.85, 2: 0.40, 3: 0.60}
    ranked = d[1] > d[3] > d[2]
    ok = all(d[c] >= limits[c] for c in d) and ranked and train_slices == 200 and n_test == 50
    criterion(7, "phantom training convergence", ok,
              f"{train_slices} train / {n_test} held-out slices, Dice ventricle {d[1]:.3f} (>=0.85), "
              f"abnormal {d[3]:.3f} (>=0.60), normal {d[2]:.3f} (>=0.40), ranking held: {ranked}, "
              f"training {times[0]:.0f} s on this machine")
    assert ok


@pytest.mark.slow
def test_08_loss_trend(desk_run, criterion):
    root, _ = desk_run
    rows = list(csv.DictReader((root / "train_a" / "train_log.csv").open()))
    first, last = float(rows[0]["l1"]), float(rows[-1]["l1"])
    ok = len(rows) == 30 and last < 0.25 * first
    criterion(8, "epoch-mean L1 trend", ok,
              f"epoch 1 {first:.4f}, epoch {len(rows)} {last:.4f}, ratio {last / first:.3f} (limit 0.25)")
    assert ok


@pytest.mark.slow
def test_09_training_determinism(desk_run, criterion):
    root, _ = desk_run
    same = {name: (root / "train_a" / name).read_bytes() == (root / "train_b" / name).read_bytes()
            for name in ("weights.wts", "train_log.csv")}
    ok = all(same.values())
    criterion(9, "seeded training determinism", ok,
              ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok


# -- 10 -------------------------------------------------------------------------

@pytest.mark.slow
def test_10_timing_harness(tmp_path, criterion):
    weights = tmp_path / "full.wts"
    save_weights(GanModel.build(ArchSpec(), seed=0), weights)
    assert main(["bench", "--weights", str(weights), "--cases", "2", "--set", "phantom.slices_per_case=20",
                 "--out", str(tmp_path / "bench")]) == 0
    d = json.loads((tmp_path / "bench" / "bench.json").read_text())
    groups = [*d["cases"].values(), d["mean_per_case"], d["mean_per_slice"]]
    sums_ok = all(abs(g["total"] - (g["preprocess"] + g["inference"] + g["postprocess"])) <= 1e-9 for g in groups)
    ps = d["mean_per_slice"]
    pre_ms = 1000 * ps["preprocess"]
    inf_ms = 1000 * (ps["inference"] + ps["postprocess"])
    per_case = d["mean_per_case"]["total"]
    within = pre_ms <= 200 and inf_ms <= 500 and per_case <= 10
    criterion(10, "timing harness (full-size network, 256 px, 20-slice cases)", sums_ok and within,
              f"stage sums equal totals: {sums_ok}; preprocessing {pre_ms:.0f} ms/slice (soft 200), "
              f"inference+postprocessing {inf_ms:.0f} ms/slice (soft 500), {per_case:.2f} s/case (soft 10)",
              soft=sums_ok)
    assert sums_ok
    if not within:
        warnings.warn(f"timing above the soft bounds: {pre_ms:.0f} / {inf_ms:.0f} ms per slice")


# -- 11, 12 ---------------------------------------------------------------------

def test_11_curve_correctness(criterion):
    ap = pr_curve(np.array([0.9, 0.8, 0.4, 0.1]), np.array([1, 0, 1, 0], bool)).auc
    rng = np.random.default_rng(11)
    truth = rng.random(10_000) < 0.3
    perfect = roc_curve(truth.astype(float), truth).auc
    inverted = roc_curve(1.0 - truth, truth).auc
    rand = roc_curve(rng.random(10_000), truth).auc
    ok = ap == 5 / 6 and perfect == 1.0 and inverted == 0.0 and 0.45 <= rand <= 0.55
    criterion(11, "PR / ROC curves", ok,
              f"AP {ap!r} (5/6 = {5 / 6!r}), ROC perfect {perfect}, inverted {inverted}, random {rand:.4f}")
    assert ok


def _mask_case(root: Path, case_id: str, slices) -> None:
    root.mkdir(parents=True)
    entries = []
    for k, lab in enumerate(slices):
        save_mask(ClassMask(lab), root / f"mask_{k:03d}.pgm")
        entries.append(SliceEntry(k, None, Path(f"mask_{k:03d}.pgm")))
    write_manifest(CaseManifest(case_id, entries, (0.9, 0.9, 6.0), root), root / "manifest.txt")


def test_12_empty_conventions_via_eval(tmp_path, criterion):
    truth = np.zeros((16, 16), np.uint8)
    truth[3:7, 3:7] = 1      # ventricle in both
    truth[10:13, 10:13] = 3  # abnormal only in the truth
    pred = np.where(truth == 3, 0, truth).astype(np.uint8)
    _mask_case(tmp_path / "truth" / "c1", "c1", [truth, truth])
    _mask_case(tmp_path / "pred" / "c1", "c1", [pred, pred])
    code = main(["eval", "--pred", str(tmp_path / "pred"), "--truth", str(tmp_path / "truth"),
                 "--out", str(tmp_path / "e")])
    rows = {r["class"]: r for r in csv.DictReader((tmp_path / "e" / "metrics.csv").open())}
    empty_both = rows["normal_wmh"]
    one_empty = rows["abnormal_wmh"]
    ok = (code == 0 and float(empty_both["dice"]) == 1.0
          and one_empty["hd95_mm"] == "" and one_empty["hd95_missing"] == "1"
          and rows["ventricle"]["hd95_mm"] == "0.0")
    criterion(12, "empty / degenerate conventions through eval", ok,
              f"empty-vs-empty Dice {empty_both['dice']}, empty-vs-nonempty hd95 "
              f"{one_empty['hd95_mm'] or 'missing'} (flag {one_empty['hd95_missing']}), exit {code}")
    assert ok
