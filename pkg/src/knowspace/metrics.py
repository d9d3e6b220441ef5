"""Lifelong-learning evaluation over a success-rate matrix.

SR[i, j] is the success rate (percent) on task j measured after training
through task i.  The suite computes the forgetting ratio (decay on learned
tasks), process forgetting ratio (oscillation against the running best),
forward transfer (zero-shot performance on unseen tasks), and backward
transfer (performance on earlier tasks), plus arithmetic means over
snapshot-level score columns.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from importlib import resources
from pathlib import Path

import numpy as np

FIXTURES = ("table1_baseline_sr", "table1_ours_sr",
            "table3_baseline_sr", "table3_ours_sr")


@dataclass(frozen=True)
class SRMatrix:
    """Square matrix of percent success rates plus row/column labels."""

    values: np.ndarray
    task_names: tuple[str, ...]
    snapshot_labels: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("success-rate matrix must be square")
        if v.shape[0] < 2:
            raise ValueError("need at least two tasks")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite entry in success-rate matrix")
        if v.min() < 0.0 or v.max() > 100.0:
            raise ValueError("entries must be percentages in [0, 100]")
        if len(self.task_names) != v.shape[1]:
            raise ValueError("task name count does not match columns")
        if len(self.snapshot_labels) != v.shape[0]:
            raise ValueError("snapshot label count does not match rows")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class MetricsReport:
    fr: float
    pfr: float
    ft: float
    bt: float
    skipped_terms: list = field(default_factory=list)


def parse_sr_matrix(source) -> SRMatrix:
    """Parse a CSV success-rate matrix.

    Expected layout: a header row (label column then task names), then one
    row per snapshot whose first field is the snapshot label.  Errors carry
    1-based line numbers.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
    else:
        text = source.read()
    rows = list(csv.reader(io.StringIO(text)))
    rows = [(i + 1, r) for i, r in enumerate(rows) if any(f.strip() for f in r)]
    if not rows:
        raise ValueError("line 1: empty success-rate CSV")
    header_line, header = rows[0]
    task_names = tuple(f.strip() for f in header[1:])
    if len(task_names) < 2:
        raise ValueError(f"line {header_line}: need at least two task columns")
    labels, values = [], []
    for line_no, row in rows[1:]:
        if len(row) != len(header):
            raise ValueError(f"line {line_no}: expected {len(header)} fields, "
                             f"got {len(row)}")
        labels.append(row[0].strip())
        parsed = []
        for col, fieldval in zip(task_names, row[1:]):
            try:
                x = float(fieldval)
            except ValueError:
                raise ValueError(f"line {line_no}: non-numeric value "
                                 f"{fieldval!r} in column {col!r}") from None
            if not (0.0 <= x <= 100.0):
                raise ValueError(f"line {line_no}: value {x} in column "
                                 f"{col!r} outside [0, 100]")
            parsed.append(x)
        values.append(parsed)
    if len(values) != len(task_names):
        raise ValueError(f"line {rows[-1][0]}: {len(values)} snapshot rows "
                         f"for {len(task_names)} tasks (matrix must be square)")
    return SRMatrix(np.array(values), task_names, tuple(labels))


def fixture_matrix(name: str) -> SRMatrix:
    """Load one of the shipped reference matrices by name."""
    if name not in FIXTURES:
        raise ValueError(f"unknown fixture {name!r}; choose from {FIXTURES}")
    path = resources.files("knowspace").joinpath(f"data/{name}.csv")
    return parse_sr_matrix(io.StringIO(path.read_text()))


# ---------------------------------------------------------------------------
# Metrics (indices below are 1-based, as in the definitions)
# ---------------------------------------------------------------------------

def forgetting_ratio(m: SRMatrix, strict: bool = True,
                     skipped: list | None = None) -> float:
    """Mean relative decay of each learned task at the final snapshot:
    FR = 100/(N-1) * sum_{i<N} (SR[i,i] - SR[N,i]) / SR[i,i]."""
    sr, n = m.values, m.n
    terms = []
    for i in range(n - 1):
        own = sr[i, i]
        if own == 0.0:
            if strict:
                raise ValueError(f"zero diagonal SR[{i + 1},{i + 1}]")
            if skipped is not None:
                skipped.append(("fr", i + 1, i + 1, "zero diagonal"))
            continue
        terms.append((own - sr[n - 1, i]) / own)
    return 100.0 * float(np.mean(terms)) if terms else 0.0


def process_forgetting_ratio(m: SRMatrix, strict: bool = True,
                             skipped: list | None = None) -> float:
    """Mean relative deficit against the running best of earlier snapshots:
    PFR = 100/(N-1) * sum_{j<N} 1/(N-j) * sum_{i>j} (H[i,j] - SR[i,j]) / H[i,j]
    with H[i,j] = max_{i'<i} SR[i',j].  Negative deficits are kept."""
    sr, n = m.values, m.n
    outer = []
    for j in range(n - 1):
        inner = []
        for i in range(j + 1, n):
            h = sr[:i, j].max()
            if h == 0.0:
                if strict:
                    raise ValueError(f"zero running max H[{i + 1},{j + 1}]")
                if skipped is not None:
                    skipped.append(("pfr", i + 1, j + 1, "zero running max"))
                continue
            inner.append((h - sr[i, j]) / h)
        if inner:
            outer.append(float(np.mean(inner)))
    return 100.0 * float(np.mean(outer)) if outer else 0.0


def forward_transfer(m: SRMatrix) -> float:
    """Mean zero-shot success on not-yet-trained tasks:
    FT = 1/(N-1) * sum_{i<N} 1/(N-i) * sum_{j>i} SR[i,j]."""
    sr, n = m.values, m.n
    return float(np.mean([sr[i, i + 1:].mean() for i in range(n - 1)]))


def backward_transfer(m: SRMatrix) -> float:
    """Mean retained success on previously trained tasks:
    BT = 1/(N-1) * sum_{i>=2} 1/(i-1) * sum_{j<i} SR[i,j]."""
    sr, n = m.values, m.n
    return float(np.mean([sr[i, :i].mean() for i in range(1, n)]))


def overall_means(per_snapshot_values) -> float:
    """Arithmetic mean of a per-snapshot score column."""
    v = np.asarray(per_snapshot_values, dtype=float)
    if v.size == 0:
        raise ValueError("empty score column")
    return float(v.mean())


def compute_report(m: SRMatrix, strict: bool = True) -> MetricsReport:
    skipped: list = []
    return MetricsReport(
        fr=forgetting_ratio(m, strict=strict, skipped=skipped),
        pfr=process_forgetting_ratio(m, strict=strict, skipped=skipped),
        ft=forward_transfer(m),
        bt=backward_transfer(m),
        skipped_terms=skipped,
    )


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def format_percent(x: float) -> str:
    """Two decimals, round-half-even (banker's rounding)."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"),
                                                rounding=ROUND_HALF_EVEN))


def report_to_text(report: MetricsReport) -> str:
    lines = [
        f"forgetting_ratio         {format_percent(report.fr)}",
        f"process_forgetting_ratio {format_percent(report.pfr)}",
        f"forward_transfer         {format_percent(report.ft)}",
        f"backward_transfer        {format_percent(report.bt)}",
    ]
    if report.skipped_terms:
        lines.append("skipped_terms:")
        lines.extend(f"  {metric} i={i} j={j}: {reason}"
                     for metric, i, j, reason in report.skipped_terms)
    else:
        lines.append("skipped_terms: none")
    return "\n".join(lines) + "\n"


def report_to_csv(report: MetricsReport) -> str:
    rows = [("metric", "value_percent"),
            ("forgetting_ratio", format_percent(report.fr)),
            ("process_forgetting_ratio", format_percent(report.pfr)),
            ("forward_transfer", format_percent(report.ft)),
            ("backward_transfer", format_percent(report.bt))]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()
