"""Command line entry point: ``quads <command> [options]``.

Exit codes: 0 success, 1 user error (config, files, usage), 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config, write_config
from .corpus import Manifest, generate_synthetic_corpus, load_split, read_manifest
from .errors import NumericalError, QuadsError, UserError
from .metrics import count_gmacs, model_size_mb
from .modelio import load_packed, packed_bytes, save_checkpoint, save_packed, write_history
from .pipeline import (
    STRATEGIES,
    append_rows,
    dataset_for,
    history_dicts,
    load_teacher,
    read_rows,
    run_ablation,
    run_strategy,
    train_teacher,
    write_summary,
)
from .plotting import history_figure, size_f1_figure
from .trainer import evaluate_split

log = logging.getLogger("quads")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _bit_length(text: str) -> int:
    b = int(text)
    if not (1 <= b <= 16 or b == 32):
        raise argparse.ArgumentTypeError(f"bit length must be 1..16 or 32, got {b}")
    return b


def run_root() -> Path:
    return Path(os.environ.get("QUADS_RUN_DIR", "runs"))


def _resolve(args) -> RunConfig:
    overrides = list(args.set or [])
    cfg = load_config(args.config, overrides)
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = cfg.replace("schedule", seed=seed)
        cfg = cfg.replace("teacher_training", seed=seed)
        if args.command == "synth-data":
            cfg = cfg.replace("corpus", seed=seed)
        if args.command == "ablate":
            cfg = cfg.replace("ablation", seeds=(seed,))
    for flag, key in (("bits", "bits"), ("cycles", "cycles"), ("alpha", "alpha")):
        value = getattr(args, flag, None)
        if value is not None and not (flag == "bits" and value == 32):
            cfg = cfg.replace("schedule", **{key: value})
    for flag in ("data", "teacher", "student_checkpoint"):
        value = getattr(args, flag, None)
        if value:
            cfg = cfg.replace("paths", **{"corpus" if flag == "data" else flag: str(value)})
    return cfg


def _fresh_dir(path: Path, force: bool) -> Path:
    if not path.parent.exists():
        raise UserError(f"parent directory does not exist: {path.parent}")
    if path.exists() and any(path.iterdir()) and not force:
        raise UserError(f"{path} already exists and is not empty (use --force to overwrite)")
    path.mkdir(exist_ok=True)
    return path


def cmd_synth_data(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out or cfg.paths.corpus or run_root() / "corpus")
    manifest = generate_synthetic_corpus(cfg.corpus, out, force=args.force)
    write_config(cfg.replace("paths", corpus=str(out)), out / "config.ini")
    sizes = {k: len(v) for k, v in manifest.splits.items()}
    print(f"wrote {len(manifest.rows)} utterances, {len(manifest.vocab)} classes to {out} (splits {sizes})")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _resolve(args)
    data = dataset_for(cfg)
    out = Path(args.out or cfg.paths.teacher or run_root() / "teacher.qdsm")
    if not out.parent.is_dir():
        raise UserError(f"parent directory does not exist: {out.parent}")
    model, history = train_teacher(cfg, data, args.epochs)
    save_checkpoint(model, out)
    best = max((h["acc"] for h in history), default=float("nan"))
    _write_teacher_history(history, out.with_suffix(".history.csv"))
    write_config(cfg.replace("paths", teacher=str(out)), out.with_suffix(".config.ini"))
    print(f"teacher saved to {out} ({model.param_count()} parameters, best val accuracy {best:.4f})")
    return 0


def _write_teacher_history(history, path) -> None:
    if Path(path).exists():
        Path(path).unlink()
    append_rows(path, history, ["epoch", "l_gt", "acc", "f1"])


def _write_labels(vocab, path) -> None:
    Path(path).write_text("\n".join(vocab) + "\n", encoding="utf-8")


def cmd_mct(args) -> int:
    cfg = _resolve(args)
    strategy = args.strategy
    bits = args.bits if args.bits is not None else cfg.schedule.bits
    if bits == 32 and strategy != "distill":
        log.info("32-bit requested: running distillation only (no codebooks)")
        strategy = "distill"
    data = dataset_for(cfg)
    teacher = load_teacher(cfg.paths.teacher)
    name = f"{strategy}-b{bits}-{args.init}-s{cfg.schedule.seed}"
    run_dir = _fresh_dir(Path(args.run_dir or cfg.paths.run_dir or run_root() / name), args.force)

    result = run_strategy(cfg, teacher, data, strategy, args.init)
    save_packed(result.model, run_dir / "model.qdsm")
    _write_labels(data.vocab, run_dir / "model.labels")
    write_history(history_dicts(result.history), run_dir / "history.csv")
    write_config(cfg.replace("paths", run_dir=str(run_dir)), run_dir / "config.ini")
    row_path = run_dir / "report.csv"
    if row_path.exists():
        row_path.unlink()
    append_rows(row_path, [result.report])
    report = Path(args.report) if args.report else run_dir.parent / "report.csv"
    append_rows(report, [result.report])
    size_f1_figure(read_rows(report), report.with_suffix(".svg"))
    history_figure(history_dicts(result.history), run_dir / "history.svg")
    r = result.report
    print(
        f"{strategy} b={r['bits']} init={args.init}: acc {r['acc']:.4f}  macro-F1 {r['f1']:.4f}  "
        f"size {r['size_mb_paper']:.2f} MB (serialized {r['size_mb_serialized']:.4f} MB)  "
        f"GMACs {r['gmacs']:.6f}  -> {run_dir}"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    data = dataset_for(cfg)
    teacher = load_teacher(cfg.paths.teacher)
    out = Path(args.out or run_root() / "ablation")
    if not out.parent.exists():
        raise UserError(f"parent directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    table = out / "ablation.csv"
    if args.force and table.exists():
        table.unlink()
    write_config(cfg, out / "config.ini")
    rows = run_ablation(cfg, teacher, data, table)
    summary = write_summary(rows, out / "ablation_summary.csv")
    size_f1_figure(summary, out / "ablation.svg", title="Ablation: size vs. median macro-F1")
    for s in summary:
        print(
            f"{s['init']:<10} {s['strategy']:<11} b={s['bits']:<2}  size {s['size_mb_paper']:.4f} MB  "
            f"median acc {s['median_acc']:.4f}  median F1 {s['median_f1']:.4f}  ({s['seeds']} seeds)"
        )
    return 0


def _labels_for(model_path: Path, manifest_path: Path, explicit) -> list[str]:
    if explicit:
        p = Path(explicit)
    elif model_path.with_suffix(".labels").is_file():
        p = model_path.with_suffix(".labels")
    else:
        full = manifest_path.parent / "manifest.csv"
        if not full.is_file():
            raise UserError("no label list found; pass --labels")
        return read_manifest(full).vocab
    return [line for line in p.read_text(encoding="utf-8").splitlines() if line]


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    model_path = Path(args.model)
    if not model_path.is_file():
        raise UserError(f"model file not found: {model_path}")
    qm = load_packed(model_path)
    manifest_path = Path(args.manifest)
    manifest: Manifest = read_manifest(manifest_path)
    vocab = _labels_for(model_path, manifest_path, args.labels)
    if qm.base.head is None or len(vocab) != qm.base.n_classes:
        raise UserError(f"label list has {len(vocab)} classes but the model predicts {qm.base.n_classes}")
    split = load_split(manifest, cfg.mel, vocab)
    acc, f1 = evaluate_split(qm.base, split, len(vocab), qm.weights() if qm.codebooks else None)
    bits = qm.bits
    params = qm.base.param_count()
    row = {
        "model": str(model_path),
        "manifest": str(manifest_path),
        "n": len(split),
        "bits": bits,
        "acc": acc,
        "f1": f1,
        "gmacs": count_gmacs(qm.base, split.features.shape[1]),
        "size_mb_paper": model_size_mb(params, bits),
        "size_mb_serialized": len(packed_bytes(qm)) / (1024 * 1024),
    }
    print(
        f"accuracy {acc:.4f}  macro-F1 {f1:.4f}  GMACs {row['gmacs']:.6f}  "
        f"size {row['size_mb_paper']:.2f} MB ({bits}-bit), serialized {row['size_mb_serialized']:.4f} MB"
    )
    if args.csv:
        append_rows(args.csv, [row], list(row))
    return 0


def cmd_report(args) -> int:
    rows = read_rows(args.csv)
    if not rows:
        raise UserError(f"no rows in {args.csv}")
    out = Path(args.out or Path(args.csv).with_suffix(".svg"))
    if not out.suffix:
        out = out.with_suffix(".svg")
    size_f1_figure(rows, out)
    print(f"figure written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quads", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("-q", "--quiet", action="store_true", help="no per-epoch progress lines")

    sp = sub.add_parser("synth-data", help="generate the synthetic spoken-command corpus")
    common(sp)
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train-teacher", help="train the large model with cross-entropy")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("mct", help="train and export one student")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--teacher")
    sp.add_argument("--student-checkpoint")
    sp.add_argument("--bits", type=_bit_length, metavar="{1..16,32}", help="32 means no quantization")
    sp.add_argument("--cycles", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--init", choices=("random", "pretrained"), default="pretrained")
    sp.add_argument("--strategy", choices=STRATEGIES, default="mct")
    sp.add_argument("--run-dir")
    sp.add_argument("--report", help="aggregate report CSV (default: next to the run directory)")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_mct)

    sp = sub.add_parser("ablate", help="run the init x strategy x bit-length grid")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--teacher")
    sp.add_argument("--student-checkpoint")
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true", help="discard finished cells instead of resuming")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("evaluate", help="score a saved model on a manifest")
    common(sp, seed=False)
    sp.add_argument("model")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--labels", help="label list, one per line (default: MODEL.labels)")
    sp.add_argument("--csv", help="append the metrics row to this CSV")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="render the size vs. F1 figure from a report CSV")
    sp.add_argument("csv")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report, config=None, set=None, quiet=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stdout,
        format="%(message)s",
        level=logging.WARNING if args.quiet else logging.INFO,
        force=True,
    )
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (QuadsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
