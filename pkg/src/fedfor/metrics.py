"""Per-run accuracy bookkeeping, seed summaries, and CSV output."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

METRICS_COLUMNS = ("round", "method", "seed", "val_acc", "best_acc",
                   "s2c_floats", "c2s_floats", "labelmap_version")
SUMMARY_COLUMNS = ("method", "E", "half_mean", "half_std", "final_mean", "final_std",
                   "acc_at_x", "comm_total_floats")
NOT_REACHED = "not_reached"


@dataclass
class RunHistory:
    method: str
    seed: int
    digest: str
    records: list = field(default_factory=list)  # RoundRecord, rounds 1..T

    def __post_init__(self) -> None:
        rounds = [r.round for r in self.records]
        if rounds != list(range(1, len(rounds) + 1)):
            raise ValueError("round indices must run 1, 2, ... without gaps")

    def append(self, record) -> None:
        if record.round != len(self.records) + 1:
            raise ValueError(f"expected round {len(self.records) + 1}, got {record.round}")
        self.records.append(record)

    @property
    def accuracies(self) -> list[float]:
        return [r.val_acc for r in self.records]

    @property
    def comm_total(self) -> int:
        return sum(r.s2c_floats + r.c2s_floats for r in self.records)


def _accs(history) -> list[float]:
    return history.accuracies if isinstance(history, RunHistory) else list(history)


def best_acc_until(history, t: int) -> float:
    accs = _accs(history)
    if t < 1 or t > len(accs):
        raise ValueError(f"t={t} outside the recorded rounds 1..{len(accs)}")
    return max(accs[:t])


def acc_at_x(history, x: float) -> int | None:
    """First round (1-based) whose accuracy reaches ``x``; None if never."""
    if not 0.0 < x < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    for t, acc in enumerate(_accs(history), start=1):
        if acc >= x:
            return t
    return None


def recovery_rounds(history, shift_round: int) -> int | None:
    """Rounds after a concept shift until accuracy regains the pre-shift best.

    Counts from ``shift_round`` (the first round trained under the new
    labels); 0 means the shift round itself already matched it.
    """
    accs = _accs(history)
    if not 2 <= shift_round <= len(accs):
        raise ValueError(f"shift round must lie in 2..{len(accs)}")
    target = max(accs[:shift_round - 1])
    for k, acc in enumerate(accs[shift_round - 1:]):
        if acc >= target:
            return k
    return None


def concept_shift_score(history, versions=None, reset: bool = True) -> float:
    """Mean over rounds of the running best accuracy.

    With ``reset`` the running best restarts whenever the label-map version
    changes, so accuracy earned under an old concept cannot mask a slow
    recovery. ``versions`` defaults to the records' label-map versions.
    """
    accs = _accs(history)
    if not accs:
        raise ValueError("empty history")
    if versions is None:
        versions = ([r.labelmap_version for r in history.records]
                    if isinstance(history, RunHistory) else [0] * len(accs))
    total, best, prev_version = 0.0, -math.inf, versions[0]
    for acc, version in zip(accs, versions):
        if reset and version != prev_version:
            best = -math.inf
        prev_version = version
        best = max(best, acc)
        total += best
    return total / len(accs)


@dataclass(frozen=True)
class SummaryRow:
    method: str
    E: int
    half_mean: float
    half_std: float | None
    final_mean: float
    final_std: float | None
    acc_at_x: float | None  # median rounds over seeds, None when not reached
    comm_total_floats: float


def summarize(runs, E: int, x: float) -> list[SummaryRow]:
    """Per-method halfway/final best accuracy (mean, sample std) over seeds."""
    runs = list(runs)
    if not runs:
        return []
    digests = {r.digest for r in runs}
    if len(digests) > 1:
        raise ValueError("runs come from different configurations")
    rows = []
    for method in dict.fromkeys(r.method for r in runs):
        group = sorted((r for r in runs if r.method == method), key=lambda r: r.seed)
        T = len(group[0].records)
        if any(len(r.records) != T for r in group):
            raise ValueError(f"{method}: runs differ in length")
        half = [best_acc_until(r, max(1, T // 2)) for r in group]
        final = [best_acc_until(r, T) for r in group]
        reach = [acc_at_x(r, x) for r in group]
        med = statistics.median(math.inf if v is None else v for v in reach)
        rows.append(SummaryRow(
            method=method, E=E,
            half_mean=statistics.fmean(half),
            half_std=statistics.stdev(half) if len(half) >= 2 else None,
            final_mean=statistics.fmean(final),
            final_std=statistics.stdev(final) if len(final) >= 2 else None,
            acc_at_x=None if math.isinf(med) else med,
            comm_total_floats=statistics.fmean(r.comm_total for r in group),
        ))
    return rows


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def metrics_rows(history: RunHistory) -> list[dict]:
    rows, best = [], -math.inf
    for r in history.records:
        best = max(best, r.val_acc)
        rows.append({"round": r.round, "method": history.method, "seed": history.seed,
                     "val_acc": r.val_acc, "best_acc": best, "s2c_floats": r.s2c_floats,
                     "c2s_floats": r.c2s_floats, "labelmap_version": r.labelmap_version})
    return rows


def summary_rows(table: list[SummaryRow]) -> list[dict]:
    rows = []
    for row in table:
        d = {c: getattr(row, c) for c in SUMMARY_COLUMNS}
        if d["acc_at_x"] is None:
            d["acc_at_x"] = NOT_REACHED
        rows.append(d)
    return rows


def emit_csv(data, path, digest: str | None = None) -> Path:
    """Write a RunHistory (metrics schema) or summary rows (summary schema).

    A non-None ``digest`` is written as a leading ``# config_digest=`` line.
    """
    path = Path(path)
    if isinstance(data, RunHistory):
        columns, rows = METRICS_COLUMNS, metrics_rows(data)
        digest = digest or data.digest
    else:
        columns, rows = SUMMARY_COLUMNS, summary_rows(list(data))
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            if digest:
                fh.write(f"# config_digest={digest}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_cell(row[c]) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


_INT_COLUMNS = {"round", "seed", "s2c_floats", "c2s_floats", "labelmap_version", "E"}
_FLOAT_COLUMNS = {"val_acc", "best_acc", "half_mean", "half_std", "final_mean",
                  "final_std", "acc_at_x", "comm_total_floats"}


def read_csv(path) -> tuple[str | None, list[dict]]:
    """Parse a file written by :func:`emit_csv`; returns (digest, typed rows)."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    digest = None
    if lines and lines[0].startswith("# config_digest="):
        digest = lines.pop(0).split("=", 1)[1]
    rows = []
    for raw in csv.DictReader(line for line in lines if line):
        row = {}
        for key, value in raw.items():
            if value == "" or value == NOT_REACHED:
                row[key] = None
            elif key in _INT_COLUMNS:
                row[key] = int(value)
            elif key in _FLOAT_COLUMNS:
                row[key] = float(value)
            else:
                row[key] = value
        rows.append(row)
    return digest, rows
