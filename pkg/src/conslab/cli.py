"""Command-line harness: ``conslab <verb> [--config FILE] [--out DIR] ...``.

Exit codes: 0 success, 1 verification failure, 2 configuration or structural
error, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from conslab import plotting
from conslab.config import ExperimentConfig, RosterEntry, default_roster, load_config
from conslab.engine import TrainingAborted, build_models, evaluate, run_training
from conslab.errors import ConfigError, DataError, DomainError, NumericError, StructuralError
from conslab.gradcheck import run_gradcheck
from conslab.losses import LossSpec, zero_point
from conslab.metrics import write_iou_csv
from conslab.nn import load_checkpoint, save_checkpoint
from conslab.synth import SPLITS, class_histogram, make_dataset, read_dataset, write_dataset

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _parse_bases(text: str) -> List[float]:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            a = math.e if tok == "e" else float(tok)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad base {tok!r}") from None
        if not a > 1:
            raise argparse.ArgumentTypeError(f"base must be > 1, got {tok}")
        out.append(a)
    return out


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="FILE", help="experiment config (JSON); defaults apply when omitted")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    p.add_argument("--seed-override", metavar="N", type=int, help="replace the training seed (compare: first seed of the panel)")
    p.add_argument("--parallel", metavar="N", type=int, default=1, help="worker processes for compare (default: 1)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="conslab", description="Conservative-loss domain adaptation lab.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("plot-loss", parents=[common], help="plot loss curves to SVG")
    p.add_argument("--bases", type=_parse_bases, default=[2.0, math.e, 3.0, 4.0], help="comma-separated bases; 'e' allowed")
    p.add_argument("--lam", type=float, default=1.0, help="loss weight of the base-roster curves (default: 1)")
    p.add_argument("--compare-lam", type=float, default=5.0, help="second weight for the scaling figure (default: 5)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference verification of losses and networks")
    p.add_argument("--plant-fault", action="store_true", help="corrupt one backprop gradient (self-test of the checker)")

    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset and print class histograms")

    p = sub.add_parser("train", parents=[common], help="run one training and write history, checkpoint and curves")
    p.add_argument("--dataset", metavar="DIR", help="read the dataset from DIR instead of generating it")

    sub.add_parser("compare", parents=[common], help="run the ablation roster and write a ranked summary")

    p = sub.add_parser("export-features", parents=[common], help="write per-pixel embeddings to CSV")
    p.add_argument("--checkpoint", metavar="FILE", required=True, help="checkpoint written by train")
    p.add_argument("--dataset", metavar="DIR", help="dataset directory (default: generate from config)")
    p.add_argument("--stride", type=int, help="pixel stride (default: from config)")
    p.add_argument("--name", default="features.csv", help="output file name inside --out")
    return parser


# --- helpers ---------------------------------------------------------------


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        n = len(cfg.compare.seeds)
        cfg.train.seed = args.seed_override
        cfg.compare.seeds = [args.seed_override + i for i in range(n)]
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: ExperimentConfig, path: Optional[str]):
    if path is None:
        return make_dataset(cfg.dataset)
    dcfg, data = read_dataset(path)
    if (dcfg.C, dcfg.K) != (cfg.dataset.C, cfg.dataset.K):
        raise StructuralError(f"dataset has C={dcfg.C}, K={dcfg.K}; config expects C={cfg.dataset.C}, K={cfg.dataset.K}")
    return data


def _write(path: Path, text: str):
    with open(path, "w", newline="") as fh:
        fh.write(text)


# --- commands --------------------------------------------------------------


def cmd_plot_loss(args) -> int:
    out = _out_dir(args)
    cl = LossSpec.conservative
    figs = {
        "loss_bases.svg": plotting.conservative_roster(args.bases, args.lam),
        "loss_lambda.svg": [("lambda = 1", cl(lam=1.0)), (f"lambda = {args.compare_lam:g}", cl(lam=args.compare_lam))],
        "loss_homogeneous.svg": plotting.homogeneous_roster(),
    }
    rows = [["figure", "curve", "zero_point"]]
    for name, roster in figs.items():
        plotting.plot_loss_curves(roster, out / name)
        for label, spec in roster:
            z = zero_point(spec)
            rows.append([name, label, "" if z is None else repr(z)])
            print(f"{name}: {label} crosses zero at p = {'none' if z is None else f'{z:.6f}'}")
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    _write(out / "zero_points.csv", buf.getvalue())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = _out_dir(args)
    report = run_gradcheck(plant_fault=args.plant_fault)
    text = "\n".join(report.lines()) + "\n"
    sys.stdout.write(text)
    _write(out / "gradcheck.txt", text)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    data = make_dataset(cfg.dataset)
    write_dataset(out, cfg.dataset, data)
    _write(out / "config.json", cfg.to_json())
    K = cfg.dataset.K
    for split in SPLITS:
        counts = class_histogram(data[split], K)
        total = int(counts.sum())
        print(f"{split}: {len(data[split])} samples, {total} pixels")
        for k, c in enumerate(counts):
            print(f"  class {k}: {int(c)} ({c / total:.4f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    _write(out / "config.json", cfg.to_json())
    data = _dataset(cfg, args.dataset)
    schedule = cfg.train.schedule()
    try:
        history, model = run_training(data, schedule, cfg.train.variant, cfg.model_config())
    except TrainingAborted as exc:
        exc.history.write_csv(out / "history.csv")
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    history.write_csv(out / "history.csv")
    save_checkpoint(out / "checkpoint.bin", model.networks)
    _, _, conf = evaluate(model, data["target_eval"])
    write_iou_csv(out / "target_iou.csv", conf)
    title = f"{cfg.train.variant}, {schedule.seg_loss_main.label}"
    plotting.plot_history(history, out / "miou.svg", title)
    steps, tgt = history.target_curve()
    best = int(np.argmax(tgt))
    print(f"final target mIoU {tgt[-1]:.4f}; best {tgt[best]:.4f} at step {steps[best]}")
    return EXIT_OK


def _entry_hash(cfg: ExperimentConfig, entry: RosterEntry) -> str:
    d = cfg.with_entry(entry).to_dict()
    d["train"].pop("seed")
    payload = {k: d[k] for k in ("dataset", "model", "train")}
    payload["seeds"] = list(cfg.compare.seeds)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _compare_job(job):
    cfg, entry, seed = job
    run = cfg.with_entry(entry, seed)
    try:
        history, _ = run_training(make_dataset(run.dataset), run.train.schedule(), run.train.variant, run.model_config())
    except NumericError as exc:
        return None, str(exc)
    return history.final_target_miou, ""


def cmd_compare(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    _write(out / "config.json", cfg.to_json())
    roster = cfg.compare.roster or default_roster()
    seeds = cfg.compare.seeds
    jobs = [(cfg, e, s) for e in roster for s in seeds]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_compare_job, jobs))
    else:
        results = [_compare_job(j) for j in jobs]

    rows = []
    for i, entry in enumerate(roster):
        res = results[i * len(seeds) : (i + 1) * len(seeds)]
        finals = [r[0] for r in res]
        errors = [r[1] for r in res if r[1]]
        mean = None if any(f is None for f in finals) else float(np.mean(finals))
        rows.append((entry, _entry_hash(cfg, entry), finals, mean, errors))

    ordered = sorted(range(len(rows)), key=lambda i: (rows[i][3] is None, -(rows[i][3] or 0.0), i))
    rank = {idx: r + 1 for r, idx in enumerate(ordered)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "name", "group", "config_hash", "mean_final_target_miou"] + [f"seed_{s}" for s in seeds] + ["status"])
    for i in ordered:
        entry, h, finals, mean, errors = rows[i]
        w.writerow(
            [rank[i], entry.name, entry.group, h, "" if mean is None else repr(mean)]
            + ["" if f is None else repr(f) for f in finals]
            + ["aborted: " + "; ".join(errors) if errors else "ok"]
        )
    _write(out / "compare.csv", buf.getvalue())

    lines = [f"{'rank':>4}  {'name':20s} {'group':12s} {'hash':12s}  mean mIoU"]
    for i in ordered:
        entry, h, _, mean, errors = rows[i]
        val = "aborted" if mean is None else f"{mean:.4f}"
        lines.append(f"{rank[i]:>4}  {entry.name:20s} {entry.group:12s} {h}  {val}")
    text = "\n".join(lines) + "\n"
    _write(out / "compare.txt", text)
    sys.stdout.write(text)
    plotting.plot_compare([rows[i][0].name for i in ordered], [rows[i][3] for i in ordered], out / "compare.svg")
    return EXIT_OK


def cmd_export_features(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    stride = cfg.export.stride if args.stride is None else args.stride
    if stride < 1:
        raise ConfigError("--stride must be >= 1")
    data = _dataset(cfg, args.dataset)
    model = build_models(cfg.model_config(), cfg.train.seed)
    load_checkpoint(args.checkpoint, model.networks)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "class"] + [f"feat_{j}" for j in range(model.config.emb_dim)])
    for split in (f"source_{cfg.export.split}", f"target_{cfg.export.split}"):
        for s in data[split]:
            if s.features.shape[2] != model.config.C:
                raise StructuralError(f"sample has {s.features.shape[2]} channels, model expects {model.config.C}")
            emb = model.embed(s.features)[::stride, ::stride]
            lab = s.labels[::stride, ::stride]
            for (y, x), k in np.ndenumerate(lab):
                w.writerow([s.domain, int(k)] + [repr(float(v)) for v in emb[y, x]])
    _write(out / args.name, buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "plot-loss": cmd_plot_loss,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "compare": cmd_compare,
    "export-features": cmd_export_features,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.parallel < 1:
        print("error: --parallel must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, StructuralError, DataError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
