"""Command-line pipeline: ``python -m reportseg {gen,train,localize,eval,rank,export}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .ballconv import LocalizationInfeasible
from .config import ConfigError, RunConfig, load_config
from .evalkit import CSV_COLUMNS, metrics_rows
from .losses import build_pseudo_mask, location_region
from .phantom import GenerationError, LoadedCase, load_corpus, write_corpus
from .report import ReportError, parse_report
from .trainer import Trainer, TrainingError, evaluate, rank_for_annotation
from .volgrid import LabelVolume, VolumeFormatError, VolumeGrid, read_volume, write_volume

EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out: Path, command: str, cfg: RunConfig, artifacts: Sequence[Path], **extra) -> Path:
    """JSON sidecar with config hash, seed, version and artifact checksums (no timestamps)."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "version": __version__,
        "artifacts": {p.name: _sha(p) for p in artifacts},
        **extra,
    }
    path = out / f"run_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _fmt(x) -> str:
    return f"{x:.10g}" if isinstance(x, float) else str(x)


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


# ---------------------------------------------------------------------------
# Predictions on disk: <dir>/<scan_id>/<organ>.vol
# ---------------------------------------------------------------------------


def write_predictions(out: Path, scan_id: str, classes: Sequence[str], prob: np.ndarray, spacing) -> None:
    for c, organ in enumerate(classes):
        write_volume(out / scan_id / f"{organ}.vol", VolumeGrid(prob[c].astype(np.float32), spacing))


def prediction_reader(root: Path, classes: Sequence[str]):
    def predict(case: LoadedCase) -> np.ndarray:
        vols = []
        for organ in classes:
            path = root / case.scan_id / f"{organ}.vol"
            if not path.exists():
                raise FileNotFoundError(f"missing prediction {path}")
            vols.append(read_volume(path).data)
        return np.stack(vols)
    return predict


def _predictor(args, classes):
    if args.checkpoint:
        return Trainer.load(args.checkpoint)
    if args.predictions:
        return prediction_reader(Path(args.predictions), classes)
    raise ConfigError("one of --checkpoint or --predictions is required")


def _classes(cases: Sequence[LoadedCase]) -> list[str]:
    if not cases:
        raise ConfigError("degenerate corpus: no cases in the selected split")
    names = cases[0].organs.names
    return [names[k] for k in sorted(names)]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    n_cases = args.cases if args.cases is not None else cfg.data.n_cases
    n_test = args.test if args.test is not None else min(cfg.data.n_test, n_cases // 2)
    out = Path(args.out)
    write_corpus(cfg.phantom, n_cases, out, seed=cfg.seed, n_test=n_test)
    write_run_manifest(out, "gen", cfg, [out / "manifest.json"], n_cases=n_cases, n_test=n_test)
    return 0


TRAIN_COLUMNS = ("step", "scan_id", "L_vol", "L_ball", "L_att", "L_sup")


def cmd_train(args) -> int:
    cfg = _config(args)
    cases = load_corpus(args.manifest, split="train")
    classes = _classes(cases)
    n_mask = cfg.data.n_mask_cases
    if n_mask > len(cases):
        raise ConfigError(f"n_mask_cases={n_mask} exceeds {len(cases)} training cases")
    mask_cases = cases[:n_mask]
    report_cases = cases[n_mask:] if cfg.data.use_reports else []
    if not mask_cases and not report_cases:
        raise ConfigError("degenerate corpus: no report or mask training cases")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(classes, replace(cfg.train, seed=cfg.seed))
    rows: list[dict] = []

    def log(m):
        for r in m["rows"]:
            rows.append({"step": m["step"], **{k: _fmt(v) for k, v in r.items()}})

    trainer.fit(report_cases, mask_cases, log)
    ckpt = out / "checkpoint.npz"
    trainer.save(ckpt)
    vs_cols = sorted({k for r in rows for k in r if k.startswith("V_s:")})
    metrics = out / "train_metrics.csv"
    write_csv(metrics, TRAIN_COLUMNS + tuple(vs_cols), rows)
    write_run_manifest(out, "train", cfg, [ckpt, metrics], steps=trainer.step,
                       n_report_cases=len(report_cases), n_mask_cases=len(mask_cases))
    return 0


def cmd_localize(args) -> int:
    cfg = _config(args)
    prob = read_volume(args.prob)
    labels = read_volume(args.organs)
    if not isinstance(labels, LabelVolume):
        raise VolumeFormatError(f"{args.organs}: expected a label volume")
    if prob.shape != labels.shape:
        raise VolumeFormatError("probability and organ volumes differ in shape")
    report = parse_report(Path(args.report).read_text())
    findings = [f for f in report.findings if f.organ == args.organ]
    if not findings:
        raise ReportError(f"report has no findings for {args.organ}")
    by_loc: dict[str, list] = {}
    for f in findings:
        by_loc.setdefault(f.location, []).append(f)
    positive = np.zeros(prob.shape, dtype=bool)
    ignore = np.zeros(prob.shape, dtype=bool)
    tumors, infeasible = [], 0
    for loc, fs in by_loc.items():
        region = location_region(labels, loc, fs, cfg.train.dilation_mm, gate=False)
        pm = build_pseudo_mask(np.asarray(prob.data, dtype=np.float64), region, fs, labels.spacing,
                               cfg.train.ball, report.is_count_known(args.organ))
        positive |= pm.positive
        ignore |= pm.ignore
        infeasible += pm.infeasible
        for t in pm.tumors:
            tumors.append({"location": loc, "center": list(map(int, t.center)), "diameter_mm": t.diameter_mm,
                           "n": t.n, "clamped": t.clamped, "sized": t.sized})
    if not tumors and infeasible:
        raise LocalizationInfeasible(f"no finding of {args.organ} could be localized")
    out = Path(args.out)
    code = np.where(positive, 1, np.where(ignore, 2, 0)).astype(np.int32)
    mask_path = out / "pseudo_mask.vol"
    write_volume(mask_path, LabelVolume(code, labels.spacing, {1: "positive", 2: "ignore"}))
    info = out / "localization.json"
    info.write_text(json.dumps({"organ": args.organ, "tumors": tumors, "infeasible": infeasible},
                               indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, "localize", cfg, [mask_path, info])
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.thresholds:
        cfg = RunConfig.from_dict(_with(cfg, "eval", thresholds=args.thresholds))
    if args.raw_count:
        cfg = RunConfig.from_dict(_with(cfg, "eval", scale_count=False))
    cases = load_corpus(args.manifest, split=args.split or cfg.eval.split)
    classes = _classes(cases)
    th = cfg.eval.detection_thresholds(cases[0].organs.spacing)
    report, overlap, outcomes = evaluate(_predictor(args, classes), cases, classes, th, cfg.eval.nsd_tol_mm)
    out = Path(args.out)
    write_csv(out, CSV_COLUMNS, metrics_rows(report, overlap))
    write_run_manifest(out.parent, "eval", cfg, [out], voxel_count=th.voxel_count, confidence=th.confidence,
                       n_cases=len(cases))
    return 0


def cmd_rank(args) -> int:
    cfg = _config(args)
    cases = load_corpus(args.manifest, split=args.split)
    classes = _classes(cases)
    ranking = rank_for_annotation(_predictor(args, classes), cases, classes, cfg.train.ball, cfg.train.dilation_mm)
    out = Path(args.out)
    rows = [{"rank": i + 1, "scan_id": s, "ball_loss": f"{v:.10g}"} for i, (s, v) in enumerate(ranking)]
    write_csv(out, ("rank", "scan_id", "ball_loss"), rows)
    write_run_manifest(out.parent, "rank", cfg, [out])
    return 0


def export_rows(rows: Sequence[dict], window: int = 1) -> tuple[list[str], list[dict]]:
    """Per-step means of every numeric column, then a trailing moving average over ``window`` steps."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    cols = [c for c in rows[0] if c not in ("step", "scan_id")] if rows else []
    by_step: dict[int, list[dict]] = {}
    for r in rows:
        by_step.setdefault(int(r["step"]), []).append(r)
    steps = sorted(by_step)
    series = {c: [] for c in cols}
    for s in steps:
        for c in cols:
            vals = [float(r[c]) for r in by_step[s] if r.get(c) not in ("", None)]
            series[c].append(float(np.mean(vals)) if vals else float("nan"))
    out = []
    for i, s in enumerate(steps):
        row = {"step": s}
        for c in cols:
            win = [v for v in series[c][max(0, i - window + 1) : i + 1] if not np.isnan(v)]
            row[c] = f"{np.mean(win):.10g}" if win else ""
        out.append(row)
    return ["step"] + cols, out


def cmd_export(args) -> int:
    cfg = _config(args)
    src = Path(args.csv)
    with open(src, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{src}: no rows to export")
    cols, out_rows = export_rows(rows, args.window)
    out = Path(args.out)
    write_csv(out, cols, out_rows)
    write_run_manifest(out.parent, "export", cfg, [out], source=src.name, window=args.window)
    return 0


def _with(cfg: RunConfig, section: str, **kw) -> dict:
    d = cfg.to_dict()
    d[section].update(kw)
    return d


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reportseg", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
        sp.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")

    g = sub.add_parser("gen", help="write a phantom corpus and manifest")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int)
    g.add_argument("--test", type=int, help="number of held-out test cases")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on a corpus manifest")
    common(t)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    lo = sub.add_parser("localize", help="ball localization of one organ's findings")
    common(lo)
    lo.add_argument("--prob", required=True, help="tumor probability volume for the organ's class")
    lo.add_argument("--organs", required=True, help="organ label volume")
    lo.add_argument("--report", required=True)
    lo.add_argument("--organ", required=True)
    lo.add_argument("--out", required=True)
    lo.set_defaults(func=cmd_localize)

    for name, func, help_ in (("eval", cmd_eval, "detection and overlap metrics"),
                              ("rank", cmd_rank, "order cases by Ball Loss for annotation")):
        e = sub.add_parser(name, help=help_)
        common(e)
        e.add_argument("--manifest", required=True)
        src = e.add_mutually_exclusive_group(required=True)
        src.add_argument("--checkpoint")
        src.add_argument("--predictions", help="directory of <scan_id>/<organ>.vol probabilities")
        e.add_argument("--out", required=True)
        e.add_argument("--split", default=None)
        if name == "eval":
            e.add_argument("--thresholds", help="VOXELS,CONFIDENCE, e.g. 50,0.5")
            e.add_argument("--raw-count", action="store_true", help="use the voxel count as given, unscaled")
        e.set_defaults(func=func)

    x = sub.add_parser("export", help="per-step plot data from a training metrics CSV")
    common(x)
    x.add_argument("--csv", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--window", type=int, default=1)
    x.set_defaults(func=cmd_export)
    return p


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, exc)
    except (ReportError, VolumeFormatError, GenerationError, TrainingError, LocalizationInfeasible,
            ValueError, KeyError) as exc:
        return _fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
