"""Command-line entry point: ``wmhseg {phantom,train,infer,eval,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 evaluation finished but some cases had no match.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import RunConfig, load_config, write_resolved
from .errors import ConfigError, DataError, NumericError, UndefinedMetricError, WmhSegError
from .imgio import CaseManifest, SliceEntry, load_case, load_weights, read_manifest, save_mask, save_weights, write_manifest
from .nncore.train import train, write_log_csv
from .phantom import generate_dataset, read_case_list
from .pipeline import STAGES, StageError, infer_slice, pairs_from_manifests

log = logging.getLogger("wmhseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_UNMATCHED = 0, 2, 3, 4, 5


# -- inputs -------------------------------------------------------------------

def find_manifests(path) -> list[Path]:
    """A manifest file, a case list (one manifest path per line), a case
    directory, or a tree of case directories."""
    path = Path(path)
    if path.is_file():
        first = path.read_text().lstrip().split("\n", 1)[0]
        if path.name == "manifest.txt" or first.startswith(("case_id=", "spacing_", "slice=")):
            return [path]
        found = read_case_list(path)
    elif path.is_dir():
        found = [path / "manifest.txt"] if (path / "manifest.txt").is_file() \
            else sorted(path.rglob("manifest.txt"))
    else:
        raise DataError(f"no such file or directory: {path}")
    missing = [p for p in found if not p.is_file()]
    if missing:
        raise DataError(f"listed manifest(s) not found: {', '.join(map(str, missing))}")
    if not found:
        raise DataError(f"no case manifests under {path}")
    return found


# -- timing -------------------------------------------------------------------

@dataclass
class TimingReport:
    """Wall-clock seconds per stage; ``per_case`` maps case_id to stage sums."""

    per_case: dict = field(default_factory=dict)
    n_slices: dict = field(default_factory=dict)

    def add(self, case_id: str, stage_times: list[dict]) -> None:
        self.per_case[case_id] = {s: float(sum(t[s] for t in stage_times)) for s in STAGES}
        self.n_slices[case_id] = len(stage_times)

    @staticmethod
    def total(stages: dict) -> float:
        return float(sum(stages[s] for s in STAGES))

    def mean_per_case(self) -> dict:
        n = max(len(self.per_case), 1)
        return {s: sum(c[s] for c in self.per_case.values()) / n for s in STAGES}

    def mean_per_slice(self) -> dict:
        n = max(sum(self.n_slices.values()), 1)
        return {s: sum(c[s] for c in self.per_case.values()) / n for s in STAGES}

    def to_dict(self) -> dict:
        cases = {cid: {**st, "total": self.total(st), "slices": self.n_slices[cid]}
                 for cid, st in self.per_case.items()}
        pc, ps = self.mean_per_case(), self.mean_per_slice()
        return {"cases": cases,
                "mean_per_case": {**pc, "total": self.total(pc)},
                "mean_per_slice": {**ps, "total": self.total(ps)}}

    def lines(self) -> list[str]:
        pc, ps = self.mean_per_case(), self.mean_per_slice()
        post = pc["inference"] + pc["postprocess"]
        post_s = ps["inference"] + ps["postprocess"]
        return [
            f"cases: {len(self.per_case)}  slices: {sum(self.n_slices.values())}",
            f"preprocessing: {pc['preprocess']:.3f} s/case ({1000 * ps['preprocess']:.1f} ms/slice)",
            f"inference+postprocessing: {post:.3f} s/case ({1000 * post_s:.1f} ms/slice)"
            f"  [inference {pc['inference']:.3f} s, postprocessing {pc['postprocess']:.3f} s]",
            f"total: {self.total(pc):.3f} s/case ({1000 * self.total(ps):.1f} ms/slice)",
        ]


# -- subcommands --------------------------------------------------------------

def cmd_phantom(cfg: RunConfig, out_dir) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = generate_dataset(cfg.phantom, cfg.dataset.cases, out, cfg.dataset.train_fraction)
    write_resolved(cfg, out)
    for p in paths.case_manifests.values():
        print(p)
    print(f"train list: {paths.train_list}")
    print(f"test list: {paths.test_list}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, data, out_dir) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.arch.image_size != cfg.preproc.target_size:
        raise ConfigError(f"arch expects {cfg.arch.image_size} px frames but preproc.target_size "
                          f"is {cfg.preproc.target_size}")
    write_resolved(cfg, out)
    pairs = pairs_from_manifests(find_manifests(data), cfg.preproc)
    log.info("training on %d slices", len(pairs))

    def checkpoint(epoch, model):
        save_weights(model, out / f"checkpoint_{epoch:03d}.wts")

    res = train(pairs, cfg.train, cfg.optim, cfg.optim, cfg.loss, cfg.arch,
                on_checkpoint=checkpoint)
    save_weights(res.model, out / "weights.wts")
    write_log_csv(res.log, out / "train_log.csv")
    print(f"weights: {out / 'weights.wts'} (best epoch {res.best_epoch})")
    print(f"log: {out / 'train_log.csv'}")
    return EXIT_OK


def _load_model(cfg: RunConfig, weights):
    model = load_weights(weights)
    if model.arch.image_size != cfg.preproc.target_size:
        raise ConfigError(f"weights expect {model.arch.image_size} px frames but preproc.target_size "
                          f"is {cfg.preproc.target_size}")
    return model


def _infer_case(args):
    model, manifest, out_root, cfg = args
    slices, _ = load_case(manifest)
    slices = [s for s in slices if s is not None]
    if not slices:
        raise DataError(f"{manifest}: no image slices")
    case_dir = Path(out_root) / slices[0].case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    entries, times = [], []
    for s in slices:
        r = infer_slice(model, s, cfg.preproc, cfg.postproc)
        name = f"mask_{s.slice_index:03d}.pgm"
        save_mask(r.mask, case_dir / name)
        np.save(case_dir / f"prob_{s.slice_index:03d}.npy", r.probs)
        entries.append(SliceEntry(s.slice_index, None, Path(name)))
        times.append(r.timings)
    write_manifest(CaseManifest(slices[0].case_id, entries, slices[0].spacing, case_dir),
                   case_dir / "manifest.txt")
    return slices[0].case_id, times


def run_inference(cfg: RunConfig, model, manifests, out_dir) -> TimingReport:
    jobs = [(model, m, out_dir, cfg) for m in manifests]
    report = TimingReport()
    if cfg.run.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.run.workers) as ex:
            results = list(ex.map(_infer_case, jobs))
    else:
        results = [_infer_case(j) for j in jobs]
    for case_id, times in results:
        report.add(case_id, times)
    return report


def cmd_infer(cfg: RunConfig, weights, data, out_dir) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    model = _load_model(cfg, weights)
    report = run_inference(cfg, model, find_manifests(data), out)
    (out / "timing.json").write_text(json.dumps(report.to_dict(), indent=2))
    for line in report.lines():
        print(line)
    return EXIT_OK


def _case_volumes(manifest: Path):
    m = read_manifest(manifest)
    _, masks = load_case(m)
    by_index = {e.slice_index: mk for e, mk in zip(m.sorted_entries(), masks) if mk is not None}
    probs = {}
    for e in m.sorted_entries():
        p = m.root / f"prob_{e.slice_index:03d}.npy"
        if p.is_file():
            probs[e.slice_index] = np.load(p)
    return m, by_index, probs


def evaluate(cfg: RunConfig, pred_manifests, truth_manifests):
    """Returns ``(report, skipped)`` where ``skipped`` lists unmatched cases."""
    preds = {}
    for p in pred_manifests:
        m, masks, probs = _case_volumes(p)
        preds[m.case_id] = (m, masks, probs)
    truths = {}
    for p in truth_manifests:
        m, masks, _ = _case_volumes(p)
        truths[m.case_id] = (m, masks)
    skipped = sorted(set(preds) ^ set(truths))
    rows, pooled = [], {"pred": [], "truth": [], "probs": []}
    lesions = {name: M.LesionCounts(0, 0, 0) for name in M.EVAL_CLASSES.values()}
    have_probs = True
    for cid in sorted(set(preds) & set(truths)):
        pm, pmasks, pprobs = preds[cid]
        tm, tmasks = truths[cid]
        if set(pmasks) != set(tmasks):
            log.warning("case %s: slice sets differ (pred %s, truth %s)", cid, sorted(pmasks), sorted(tmasks))
            skipped.append(cid)
            continue
        idx = sorted(tmasks)
        pv = np.stack([pmasks[i].labels for i in idx])
        tv = np.stack([tmasks[i].labels for i in idx])
        if pv.shape != tv.shape:
            log.warning("case %s: prediction shape %s differs from truth %s", cid, pv.shape, tv.shape)
            skipped.append(cid)
            continue
        sx, sy, st = tm.spacing
        for c, name in M.EVAL_CLASSES.items():
            rows.append(M.class_row(cid, name, pv == c, tv == c, (st, sy, sx), cfg.metrics.hd95_mode))
            lc = M.lesion_confusion(pv, tv, c)
            acc = lesions[name]
            lesions[name] = M.LesionCounts(acc.tp + lc.tp, acc.fp + lc.fp, acc.fn + lc.fn)
        pooled["pred"].append(pv.ravel())
        pooled["truth"].append(tv.ravel())
        if have_probs and set(pprobs) >= set(idx):
            pooled["probs"].append(np.stack([pprobs[i] for i in idx], axis=1).reshape(4, -1))
        else:
            have_probs = False
    if not rows:
        return None, sorted(skipped)
    report = M.aggregate(rows)
    pred, truth = np.concatenate(pooled["pred"]), np.concatenate(pooled["truth"])
    extra = {"lesions": {k: asdict(v) for k, v in lesions.items()},
             "hd95_mode": cfg.metrics.hd95_mode, "skipped_cases": sorted(skipped)}
    try:
        extra["normal_vs_abnormal"] = M.normal_vs_abnormal_matrix(pred, truth).to_dict()
    except UndefinedMetricError as e:
        extra["normal_vs_abnormal"] = {"undefined": str(e)}
    if have_probs and pooled["probs"]:
        probs = np.concatenate(pooled["probs"], axis=1)
        try:
            extra["normal_vs_abnormal_from_probabilities"] = M.normal_vs_abnormal_matrix(
                None, truth, probs, cfg.metrics.abnormal_threshold).to_dict()
        except UndefinedMetricError as e:
            extra["normal_vs_abnormal_from_probabilities"] = {"undefined": str(e)}
        curves = {}
        for c, name in M.EVAL_CLASSES.items():
            for kind, fn in (("pr", M.pr_curve), ("roc", M.roc_curve)):
                try:
                    curves[f"{name}_{kind}"] = fn(probs[c], truth == c, cfg.metrics.n_thresholds).to_dict()
                except UndefinedMetricError as e:
                    curves[f"{name}_{kind}"] = {"undefined": str(e)}
        wmh = (truth == 2) | (truth == 3)
        pn, pa = probs[2][wmh], probs[3][wmh]
        tot = pn + pa
        score = np.divide(pa, tot, out=np.zeros_like(pa), where=tot > 0)
        try:
            curves["normal_vs_abnormal_roc"] = M.roc_curve(score, truth[wmh] == 3,
                                                           cfg.metrics.n_thresholds).to_dict()
        except UndefinedMetricError as e:
            curves["normal_vs_abnormal_roc"] = {"undefined": str(e)}
        report.curves = curves
    report.extra = extra
    return report, sorted(skipped)


def cmd_eval(cfg: RunConfig, pred, truth, out_dir) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    report, skipped = evaluate(cfg, find_manifests(pred), find_manifests(truth))
    for cid in skipped:
        log.warning("case %s has no match and was skipped", cid)
    if report is None:
        raise DataError("no matching cases between prediction and truth")
    M.write_rows_csv(report.rows, out / "metrics.csv")
    M.write_report_json(report, out / "metrics.json")
    for name, stats in report.summary.items():
        d, h = stats["dice"], stats["hd95_mm"]
        hd = "n/a" if h["mean"] is None else f"{h['mean']:.2f}"
        print(f"{name}: dice {d['mean']:.4f} +/- {d['sd']:.4f}  hd95 {hd} mm "
              f"({h['n_missing']} missing)")
    print(f"rows: {out / 'metrics.csv'}  summary: {out / 'metrics.json'}")
    return EXIT_UNMATCHED if skipped else EXIT_OK


def cmd_bench(cfg: RunConfig, weights, n_cases: int, out_dir=None) -> int:
    model = _load_model(cfg, weights)
    if cfg.phantom.size < 16:
        raise ConfigError("phantom.size too small for a benchmark")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        # the split is irrelevant here, but generate_dataset needs two cases
        paths = generate_dataset(cfg.phantom, max(n_cases, 2), tmp / "data", 0.5)
        manifests = sorted(paths.case_manifests.values())[:n_cases]
        report = run_inference(replace(cfg, run=replace(cfg.run, workers=1)), model, manifests, tmp / "pred")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out)
        (out / "bench.json").write_text(json.dumps(report.to_dict(), indent=2))
    for line in report.lines():
        print(line)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="file of 'section.key = value' lines")
    common.add_argument("--preset", help="named group of settings applied before --config (e.g. desk)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting, e.g. --set train.epochs=2 (repeatable)")
    common.add_argument("--seed", type=int, help="shortcut for --set run.seed=N")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="wmhseg", description=(
        "Ventricle and white-matter hyperintensity segmentation of FLAIR slices "
        "with a conditional GAN."))
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, help="shortcut for --set dataset.cases=N")

    s = sub.add_parser("train", parents=[common], help="train from case manifests")
    s.add_argument("--data", required=True, help="case list, manifest, or directory of cases")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, help="shortcut for --set train.epochs=N")

    s = sub.add_parser("infer", parents=[common], help="segment cases with trained weights")
    s.add_argument("--weights", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, help="shortcut for --set run.workers=N")

    s = sub.add_parser("eval", parents=[common], help="compare predicted masks with truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("bench", parents=[common], help="time inference on generated phantom cases")
    s.add_argument("--weights", required=True)
    s.add_argument("--cases", type=int, default=3)
    s.add_argument("--out")
    return p


def _resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    for flag, key in (("seed", "run.seed"), ("cases", "dataset.cases"),
                      ("epochs", "train.epochs"), ("workers", "run.workers")):
        value = getattr(args, flag, None)
        if value is not None and not (flag == "cases" and args.command == "bench"):
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides, args.preset).seeded()


def _exit_code(e: BaseException) -> int:
    if isinstance(e, StageError):
        e = e.cause
    if isinstance(e, ConfigError):
        return EXIT_CONFIG
    if isinstance(e, NumericError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        if args.command == "phantom":
            return cmd_phantom(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.data, args.out)
        if args.command == "infer":
            return cmd_infer(cfg, args.weights, args.data, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.pred, args.truth, args.out)
        return cmd_bench(cfg, args.weights, args.cases, args.out)
    except (WmhSegError, OSError) as e:
        print(f"wmhseg {args.command}: error: {e}", file=sys.stderr)
        return _exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
