"""Metric records and their on-disk formats.

A run directory holds `metrics.csv` (one row per MetricRecord, fixed header)
and `diagnostics.jsonl` (one `{step, kind, payload}` object per line for
heavy diagnostics). Nothing is overwritten unless `force` is set.
"""
import csv
import dataclasses
import io
import json
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .utils import ConfigError, logger

CSV_HEADER = ("step", "task", "loss", "accuracy", "dead_frac", "zombie_frac", "param_norm", "entropy")
METRICS_FILE = "metrics.csv"
DIAGNOSTICS_FILE = "diagnostics.jsonl"
CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "checkpoint.json"
PROBE_FILE = "probe.json"

LOSS_BY_TASK_FILE = "loss_by_task.csv"
BOUNDARY_SPIKES_FILE = "boundary_spikes.csv"
DOSE_FILE = "dose.csv"
DOSE_HEADER = ("treatment", "pretrain_loss", "finetune_loss", "finetune_loss_std", "seeds")


@dataclasses.dataclass(frozen=True)
class MetricRecord:
    step: int
    task: int
    loss: float
    accuracy: float | None
    dead_frac: float
    zombie_frac: float
    param_norm: float
    entropy: float | None
    layer_norms: dict[int, float] = dataclasses.field(default_factory=dict)
    diverged: bool = False
    # id of a heavy diagnostic written to the JSONL sidecar at the same step
    ref: str | None = None

    @property
    def order_key(self) -> tuple[int, int]:
        return self.step, self.task

    def csv_row(self) -> list[str]:
        return [
            str(self.step), str(self.task), format_float(self.loss), format_float(self.accuracy),
            format_float(self.dead_frac), format_float(self.zombie_frac),
            format_float(self.param_norm), format_float(self.entropy),
        ]

    @classmethod
    def from_csv_row(cls, row: dict[str, str]) -> "MetricRecord":
        def opt(v: str) -> float | None:
            return float(v) if v else None
        loss = float(row["loss"])
        return cls(
            step=int(row["step"]), task=int(row["task"]), loss=loss, accuracy=opt(row["accuracy"]),
            dead_frac=float(row["dead_frac"]), zombie_frac=float(row["zombie_frac"]),
            param_norm=float(row["param_norm"]), entropy=opt(row["entropy"]),
            diverged=not np.isfinite(loss),
        )


def format_float(value: float | None) -> str:
    if value is None:
        return ""
    # repr is the shortest string that round-trips exactly
    return repr(float(value))


class MetricLog:
    """Append-only list of records, ordered by (step, task), mirrored to an optional sink.

    Within a run the step never decreases; the paired records around a task
    switch share a step and differ in the task index.
    """
    def __init__(self, sink: "RunWriter | None" = None) -> None:
        self.records: list[MetricRecord] = []
        self.sink = sink

    def append(self, record: MetricRecord) -> None:
        if self.records and record.order_key <= self.records[-1].order_key:
            raise ValueError(f"record at {record.order_key} does not follow {self.records[-1].order_key}")
        self.records.append(record)
        if self.sink is not None:
            self.sink.write_record(record)

    def diagnostic(self, step: int, kind: str, payload: dict[str, Any]) -> str:
        """write a heavy diagnostic; the record at the same step, if any, keeps its id"""
        ref = f"{kind}@{step}"
        if self.sink is not None:
            self.sink.write_diagnostic(step, kind, payload)
        if self.records and self.records[-1].step == step:
            self.records[-1] = dataclasses.replace(self.records[-1], ref=ref)
        return ref

    def flush(self) -> None:
        if self.sink is not None:
            self.sink.flush()

    @property
    def last(self) -> MetricRecord | None:
        return self.records[-1] if self.records else None


def check_writable(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError("output file exists, use --force to overwrite", path=str(path))


class RunWriter:
    """writes metrics.csv and diagnostics.jsonl into one run directory"""
    def __init__(self, out_dir: Path | str, *, force: bool = False) -> None:
        self.out_dir = Path(out_dir)
        self.metrics_path = self.out_dir / METRICS_FILE
        self.diagnostics_path = self.out_dir / DIAGNOSTICS_FILE
        for p in (self.metrics_path, self.diagnostics_path):
            check_writable(p, force)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._metrics = self.metrics_path.open("w", newline="", encoding="utf-8")
        self._csv = csv.writer(self._metrics, lineterminator="\n")
        self._csv.writerow(CSV_HEADER)
        self._diagnostics = self.diagnostics_path.open("w", encoding="utf-8")

    def write_record(self, record: MetricRecord) -> None:
        self._csv.writerow(record.csv_row())

    def write_diagnostic(self, step: int, kind: str, payload: dict[str, Any]) -> None:
        self._diagnostics.write(json.dumps({"step": step, "kind": kind, "payload": payload}, sort_keys=True) + "\n")

    def flush(self) -> None:
        self._metrics.flush()
        self._diagnostics.flush()

    def close(self) -> None:
        self._metrics.close()
        self._diagnostics.close()

    def __enter__(self) -> "RunWriter":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def read_metrics(path: Path | str) -> list[MetricRecord]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ConfigError(f"unexpected metrics header, expected {','.join(CSV_HEADER)}", path=str(path), value=reader.fieldnames)
        return [MetricRecord.from_csv_row(row) for row in reader]


def read_diagnostics(path: Path | str) -> list[dict[str, Any]]:
    out = []
    with Path(path).open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as jde:
                raise ConfigError(f"invalid JSON record: {jde.msg}", path=f"{path}:{line_no}") from jde
    return out


def write_table(path: Path, header: Iterable[str], rows: Iterable[Iterable[Any]], force: bool = False) -> Path:
    check_writable(path, force)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(format_float(v) if isinstance(v, float) else v for v in row)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def loss_by_task(records: list[MetricRecord]) -> list[tuple[Any, ...]]:
    """(task, first_step, last_step, first_loss, last_loss, first_accuracy, last_accuracy) per task"""
    firsts: dict[int, MetricRecord] = {}
    lasts: dict[int, MetricRecord] = {}
    for r in records:
        firsts.setdefault(r.task, r)
        lasts[r.task] = r
    return [
        (t, firsts[t].step, lasts[t].step, firsts[t].loss, lasts[t].loss, firsts[t].accuracy, lasts[t].accuracy)
        for t in sorted(firsts)
    ]


def boundary_spikes(records: list[MetricRecord]) -> list[tuple[Any, ...]]:
    """before/after pairs at every task switch, with the loss and dead-fraction jumps"""
    out = []
    for before, after in zip(records, records[1:]):
        if after.task == before.task + 1 and after.step == before.step:
            out.append((
                before.step, after.task, before.loss, after.loss, after.loss - before.loss,
                before.dead_frac, after.dead_frac,
            ))
    return out


def export_plot_tables(source: Path | str, force: bool = False) -> list[Path]:
    """fold a run directory (or its metrics.csv) into plot-ready tables next to it"""
    source = Path(source)
    run_dir = source if source.is_dir() else source.parent
    written = []
    metrics = run_dir / METRICS_FILE
    if metrics.exists():
        records = read_metrics(metrics)
        written.append(write_table(
            run_dir / LOSS_BY_TASK_FILE,
            ("task", "first_step", "last_step", "first_loss", "last_loss", "first_accuracy", "last_accuracy"),
            loss_by_task(records), force,
        ))
        written.append(write_table(
            run_dir / BOUNDARY_SPIKES_FILE,
            ("step", "new_task", "loss_before", "loss_after", "loss_jump", "dead_frac_before", "dead_frac_after"),
            boundary_spikes(records), force,
        ))
    dose = run_dir / DOSE_FILE
    if dose.exists():
        # already plot-ready, only checked
        with dose.open(newline="", encoding="utf-8") as f:
            header = tuple(next(csv.reader(f), ()))
        if header != DOSE_HEADER:
            raise ConfigError("unexpected dose table header", path=str(dose), value=header)
        written.append(dose)
    if not written:
        raise ConfigError(f"no {METRICS_FILE} or {DOSE_FILE} found", path=str(run_dir))
    logger.info(f"Plot tables: {', '.join(p.name for p in written)}")
    return written
