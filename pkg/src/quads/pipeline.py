"""End-to-end runs: teacher training, one strategy at one bit length, the ablation grid."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .corpus import Dataset, load_corpus
from .errors import UserError
from .metrics import efficiency_report
from .modelio import load_checkpoint, packed_bytes
from .models import InitMode, ModelGraph, initialize, project_teacher
from .quantizer import QuantizedModel
from .trainer import (
    baseline_quantize_after_distill,
    distill_only,
    evaluate_split,
    mct_train,
    quantize_once,
    train_supervised,
)

log = logging.getLogger(__name__)

STRATEGIES = ("distill", "quant-after", "mct")
REPORT_FIELDS = [
    "strategy", "init", "bits", "seed", "param_count", "size_mb_paper", "size_mb_serialized",
    "gmacs", "acc", "f1", "energy_proxy",
]


def dataset_for(cfg: RunConfig, corpus_dir=None) -> Dataset:
    path = corpus_dir or cfg.paths.corpus
    if not path:
        raise UserError("no corpus directory given (set paths.corpus or pass --data)")
    if not Path(path).is_dir():
        raise UserError(f"corpus directory not found: {path}")
    return load_corpus(path, cfg.mel)


def train_teacher(cfg: RunConfig, data: Dataset, epochs: int | None = None) -> tuple[ModelGraph, list[dict]]:
    tt = cfg.teacher_training
    model = initialize(cfg.teacher, seed=tt.seed, n_classes=data.n_classes)
    return train_supervised(
        model,
        data,
        epochs=tt.epochs if epochs is None else epochs,
        lr=tt.lr,
        batch_size=tt.batch_size,
        seed=tt.seed,
        patience=tt.patience,
    )


def load_teacher(path) -> ModelGraph:
    if not path or not Path(path).is_file():
        raise UserError(f"teacher checkpoint not found: {path or '(unset)'}")
    return load_checkpoint(path).as_teacher()


def init_mode(cfg: RunConfig, variant: str, teacher: ModelGraph) -> InitMode:
    if variant == "random":
        return InitMode("random")
    if variant != "pretrained":
        raise UserError(f"unknown init {variant!r}")
    if cfg.paths.student_checkpoint:
        return InitMode("pretrained", cfg.paths.student_checkpoint)
    return InitMode("pretrained", project_teacher(teacher, cfg.student))


@dataclass
class RunResult:
    model: QuantizedModel
    history: list
    acc: float
    f1: float
    report: dict


def _as_packed(model: ModelGraph) -> QuantizedModel:
    return QuantizedModel(model, {}, set(model.parameters()))


def finish_run(cfg: RunConfig, data: Dataset, qm: QuantizedModel, history, strategy, init, bits, seed) -> RunResult:
    acc, f1 = evaluate_split(qm.base, data.test, data.n_classes, qm.weights() if qm.codebooks else None)
    eff = efficiency_report(qm.base, bits, data.frames, len(packed_bytes(qm)), cfg.energy or None)
    row = {
        "strategy": strategy,
        "init": init,
        "bits": bits,
        "seed": seed,
        "param_count": eff.param_count,
        "size_mb_paper": eff.size_mb_paper_convention,
        "size_mb_serialized": eff.size_mb_serialized,
        "gmacs": eff.gmacs,
        "acc": acc,
        "f1": f1,
        "energy_proxy": "" if eff.energy_proxy is None else eff.energy_proxy,
    }
    return RunResult(qm, history, acc, f1, row)


def run_strategy(cfg: RunConfig, teacher: ModelGraph, data: Dataset, strategy: str, init: str) -> RunResult:
    """Train one student with the given strategy at ``cfg.schedule.bits``."""
    sched = cfg.schedule
    mode = init_mode(cfg, init, teacher)
    if strategy == "mct":
        qm, history = mct_train(teacher, mode, data, sched, cfg.student)
        bits = sched.bits
    elif strategy == "quant-after":
        qm, history = baseline_quantize_after_distill(teacher, mode, data, sched, cfg.student)
        bits = sched.bits
    elif strategy == "distill":
        student, history = distill_only(teacher, mode, data, sched, cfg.student)
        qm, bits = _as_packed(student), 32
    else:
        raise UserError(f"unknown strategy {strategy!r} (choose from {', '.join(STRATEGIES)})")
    return finish_run(cfg, data, qm, history, strategy, init, bits, sched.seed)


def read_rows(path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        return []
    with open(p, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def append_rows(path, rows: list[dict], fields=REPORT_FIELDS) -> None:
    p = Path(path)
    new = not p.is_file()
    with open(p, "a", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _cell(row) -> tuple:
    return (int(row["seed"]), row["init"], row["strategy"], int(row["bits"]))


def run_ablation(cfg: RunConfig, teacher: ModelGraph, data: Dataset, out_csv) -> list[dict]:
    """{random, pretrained} x {distill, quant-after, mct} over the configured seeds and bit lengths.

    Rows already present in ``out_csv`` are skipped, so an interrupted grid resumes.
    """
    done = {_cell(r) for r in read_rows(out_csv)}
    for seed in cfg.ablation.seeds:
        for init in ("random", "pretrained"):
            wanted = [(seed, init, "distill", 32)]
            for b in cfg.ablation.bits:
                wanted += [(seed, init, "quant-after", b), (seed, init, "mct", b)]
            if all(c in done for c in wanted):
                continue
            base = cfg.replace("schedule", seed=seed)
            mode = init_mode(base, init, teacher)
            student, hist = distill_only(teacher, mode, data, base.schedule, base.student)
            if (seed, init, "distill", 32) not in done:
                r = finish_run(base, data, _as_packed(student), hist, "distill", init, 32, seed)
                append_rows(out_csv, [r.report])
            for b in cfg.ablation.bits:
                sb = base.replace("schedule", bits=b)
                if (seed, init, "quant-after", b) not in done:
                    qm = quantize_once(student, sb.schedule)
                    append_rows(out_csv, [finish_run(sb, data, qm, hist, "quant-after", init, b, seed).report])
                if (seed, init, "mct", b) not in done:
                    r = run_strategy(sb, teacher, data, "mct", init)
                    append_rows(out_csv, [r.report])
                log.info("ablation seed %d init %s bits %d done", seed, init, b)
    return read_rows(out_csv)


def summarize(rows: list[dict]) -> list[dict]:
    """Median accuracy / F1 per (init, strategy, bits) cell across seeds."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["init"], r["strategy"], int(r["bits"])), []).append(r)
    out = []
    for (init, strategy, bits), rs in sorted(groups.items()):
        out.append(
            {
                "init": init,
                "strategy": strategy,
                "bits": bits,
                "seeds": len(rs),
                "param_count": int(rs[0]["param_count"]),
                "size_mb_paper": float(rs[0]["size_mb_paper"]),
                "median_acc": float(np.median([float(r["acc"]) for r in rs])),
                "median_f1": float(np.median([float(r["f1"]) for r in rs])),
            }
        )
    return out


SUMMARY_FIELDS = ["init", "strategy", "bits", "seeds", "param_count", "size_mb_paper", "median_acc", "median_f1"]


def write_summary(rows: list[dict], path) -> list[dict]:
    summary = summarize(rows)
    p = Path(path)
    if p.exists():
        p.unlink()
    append_rows(p, summary, SUMMARY_FIELDS)
    return summary


def history_dicts(history) -> list[dict]:
    return [h.as_dict() if dataclasses.is_dataclass(h) else dict(h) for h in history]
