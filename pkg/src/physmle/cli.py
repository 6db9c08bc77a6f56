"""``physmle`` command line: data generation, training, evaluation, protocols,
inference, gradient checks, signal tools and reports.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class NumericalFailure(FloatingPointError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _load_config(args):
    from .config import CliConfig

    cfg = CliConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "iterations", None) is not None:
        cfg.train.iterations = args.iterations
    cfg.train.validate()
    return cfg


def _manifests(dirs):
    from .stmap import DomainManifest

    out = []
    for d in dirs:
        p = Path(d)
        if not (p / DomainManifest.MANIFEST).exists():
            raise FileNotFoundError(f"{p} has no {DomainManifest.MANIFEST}")
        out.append(DomainManifest.load(p))
    return out


def _task_summary(report) -> dict:
    return {t: report.tasks[t] for t in ("hr", "spo2", "rr")}


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args):
    from .stmap import build_domain

    cfg = _load_config(args)
    specs = cfg.data.domain_specs(args.domains)
    out = Path(args.out)
    rows = []
    for i, spec in enumerate(specs):
        params = spec.generator(cfg.generator)
        m = build_domain(params, spec.label_mask, cfg.data.subjects, cfg.data.windows_per_subject,
                         out / spec.domain_id, domain_id=spec.domain_id, seed=args.seed * 1000 + i)
        rows.append((spec.domain_id, "+".join(m.label_mask.names()), len(m.subjects()), len(m.entries)))
    print(f"{'domain':<8} {'labels':<14} {'subjects':>8} {'windows':>8}")
    for r in rows:
        print(f"{r[0]:<8} {r[1]:<14} {r[2]:>8} {r[3]:>8}")
    return EXIT_OK


def cmd_train(args):
    from .data import WindowDataset
    from .train import save_checkpoint, train

    cfg = _load_config(args)
    ds = WindowDataset.from_manifests(_manifests(args.data), shift=cfg.train.shift_frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg.train, ds, log_path=out / "loss.jsonl")
    save_checkpoint(out / "checkpoint.npz", res.model, cfg.train)
    (out / "config.json").write_text(_dump(cfg.to_dict()) + "\n")
    last = res.log[-1] if res.log else {}
    print(f"trained {len(res.log)} iterations on {len(ds)} windows; final joint loss "
          f"{last.get('joint', float('nan')):.4f}; checkpoint {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(args):
    from .evaluate import evaluate

    (manifest,) = _manifests([args.data])
    report = evaluate(args.checkpoint, manifest)
    path = report.save(args.out)
    print(_dump(_task_summary(report)))
    print(f"report written to {path}")
    return EXIT_OK


def cmd_protocol1(args):
    from .evaluate import run_protocol_I
    from .report import markdown_table

    cfg = _load_config(args)
    runs = run_protocol_I(cfg.train, _manifests(args.data), out_dir=args.out,
                          parallel=args.parallel or cfg.protocol.parallel)
    summary = {r.target: {"train_domains": r.train_domains, "seconds": r.seconds,
                          "tasks": r.report.tasks} for r in runs}
    Path(args.out, "summary.json").write_text(_dump(summary) + "\n")
    print(markdown_table([(r.target, r.report.to_dict()) for r in runs]), end="")
    return EXIT_OK


def cmd_protocol2(args):
    from .evaluate import run_protocol_II
    from .report import markdown_table

    cfg = _load_config(args)
    (manifest,) = _manifests([args.data])
    k = args.folds if args.folds is not None else cfg.protocol.folds
    out = run_protocol_II(cfg.train, manifest, k=k, out_dir=args.out)
    Path(args.out, "summary.json").write_text(_dump({"mean": out.mean, "splits": out.splits}) + "\n")
    rows = [(f"fold {i}", r.to_dict()) for i, r in enumerate(out.folds)]
    rows.append(("mean", {"tasks": out.mean}))
    print(markdown_table(rows), end="")
    return EXIT_OK


def cmd_infer(args):
    from . import signal
    from .grad import no_grad
    from .stmap import read_stmap, resize_rows_array
    from .train import load_checkpoint

    model, cfg = load_checkpoint(args.checkpoint)
    x, _ = read_stmap(args.stmap)
    if x.frames != cfg.model.frames:
        raise ValueError(f"checkpoint expects {cfg.model.frames} frames, file has {x.frames}")
    inp = (resize_rows_array(x.values, cfg.model.rows) / np.float32(255.0))[None].astype(np.float32)
    with no_grad():
        pred = model(inp).predictions
    if not all(np.all(np.isfinite(pred[k].data)) for k in pred):
        raise NumericalFailure("non-finite prediction")
    bvp = pred["bvp"].data[0].astype(np.float64)
    try:
        hrv = signal.hrv_metrics(bvp, x.fps)
    except ValueError:
        hrv = None
    out = {"hr": float(pred["hr"].data[0]), "spo2": float(pred["spo2"].data[0]),
           "rr": float(pred["rr"].data[0]), "bvp": [round(float(v), 6) for v in bvp],
           "hrv": hrv}
    print(_dump(out))
    return EXIT_OK


def cmd_gradcheck(args):
    from .diagnostics import TOLERANCE, run_suite

    results = run_suite(n_coords=args.coords, composite_coords=args.composite_coords, seed=args.seed)
    for r in results:
        print(f"{r.name:<20} {r.error:.3e}  {'ok' if r.ok else 'FAIL'}")
    worst = max(r.error for r in results)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    if not all(r.ok for r in results):
        raise NumericalFailure(f"gradient check exceeded tolerance: {worst:.3e}")
    return EXIT_OK


def _read_series(path):
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p).astype(np.float64).reshape(-1)
    if p.suffix == ".stmap":
        from .stmap import read_stmap

        _, labels = read_stmap(p)
        if not labels.mask.bvp:
            raise ValueError(f"{p} carries no BVP label")
        return np.asarray(labels.bvp, np.float64)
    return np.loadtxt(p, delimiter="," if p.suffix == ".csv" else None, dtype=np.float64).reshape(-1)


def cmd_signal(args):
    from . import signal

    x = _read_series(args.input)
    fs = args.fs
    if args.tool == "hr":
        out = {"hr": signal.heart_rate(x, fs)}
    elif args.tool == "rr":
        est = signal.respiration_estimate(x, fs)
        out = {"rr": est.rr, "peak_frequency": est.peak_frequency, "modulation": est.modulation,
               "low_confidence": est.low_confidence}
    elif args.tool == "hrv":
        out = signal.hrv_metrics(x, fs)
    elif args.tool == "peaks":
        pk = signal.find_peaks(x, fs)
        out = {"indices": pk.indices.tolist(), "times": pk.times.tolist()}
    else:
        spec = signal.periodogram(x, fs)
        out = {"frequencies": spec.frequencies.tolist(), "power": spec.power.tolist()}
    print(_dump(out))
    return EXIT_OK


def cmd_report(args):
    from .report import render_run

    text, written = render_run(args.run, svg=args.svg)
    print(text, end="")
    for p in written:
        print(f"wrote {p}", file=sys.stderr)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", default=None, help="JSON config (train/generator/data/protocol sections)")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="physmle", formatter_class=fmt,
                                     description="Multi-task physiological measurement from STMaps.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate synthetic domains", formatter_class=fmt)
    p.add_argument("--config", default=None, help="JSON config (generator/data sections are used)")
    p.add_argument("--out", required=True, help="output directory, one subdirectory per domain")
    p.add_argument("--domains", type=int, default=None, help="number of domains; all configured ones when omitted")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on one or more domains", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", nargs="+", required=True, help="domain directories")
    p.add_argument("--out", required=True, help="output directory for checkpoint and loss log")
    p.add_argument("--iterations", type=int, default=None, help="override the configured iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a domain", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    p.add_argument("--data", required=True, help="domain directory")
    p.add_argument("--out", required=True, help="output directory for report JSON/CSV")
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity; evaluation is deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("protocol1", help="leave-one-domain-out evaluation", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", nargs="+", required=True, help="domain directories (at least two)")
    p.add_argument("--out", required=True, help="output directory for per-target reports")
    p.add_argument("--iterations", type=int, default=None, help="override the configured iterations")
    p.add_argument("--parallel", action="store_true", help="run targets in PHYSMLE_THREADS processes")
    p.set_defaults(func=cmd_protocol1)

    p = sub.add_parser("protocol2", help="subject-disjoint k-fold evaluation in one domain",
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--data", required=True, help="domain directory")
    p.add_argument("--out", required=True, help="output directory for per-fold reports")
    p.add_argument("--folds", type=int, default=None, help="number of folds; the config value when omitted")
    p.add_argument("--iterations", type=int, default=None, help="override the configured iterations")
    p.set_defaults(func=cmd_protocol2)

    p = sub.add_parser("infer", help="predict HR, SpO2, RR, BVP and HRV for one STMap file",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint .npz")
    p.add_argument("--stmap", required=True, help="STMap file")
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity; inference is deterministic")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the full loss",
                       formatter_class=fmt)
    p.add_argument("--coords", type=int, default=16, help="sampled coordinates per primitive parameter")
    p.add_argument("--composite-coords", type=int, default=4,
                   help="sampled coordinates per parameter of the composite case")
    p.add_argument("--seed", type=int, default=0, help="coordinate sampling seed")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("signal", help="signal tools on a BVP sequence", formatter_class=fmt)
    p.add_argument("tool", choices=("hr", "rr", "hrv", "peaks", "spectrum"), help="what to compute")
    p.add_argument("--input", required=True, help=".npy, .csv/.txt (one value per line) or .stmap (its BVP label)")
    p.add_argument("--fs", type=float, default=30.0, help="sampling rate in Hz")
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity; signal tools are deterministic")
    p.set_defaults(func=cmd_signal)

    p = sub.add_parser("report", help="Markdown table (and SVG plots) from a protocol run",
                       formatter_class=fmt)
    p.add_argument("--run", required=True, help="directory holding report_*.json files")
    p.add_argument("--svg", action="store_true", help="also write predicted-vs-true BVP plots")
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity; reports are deterministic")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    from .stmap import StMapFormatError
    from .train import NonFiniteLoss

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StMapFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
