"""
Report charts
Parses a MetricReport CSV and draws one bar chart (mean with std error bars) per
metric as a standalone SVG file. Output bytes depend only on the input CSV.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .exceptions import ReportParseError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("variant", "conditioning")
SVG_SALT = "latent-lab"


@dataclass
class ReportRow:
    variant: str
    conditioning: str
    status: str = "ok"
    values: Dict[str, Optional[float]] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return f"{self.variant}\n{self.conditioning}"


@dataclass
class ParsedReport:
    metrics: List[str]
    rows: List[ReportRow]
    header: Dict[str, str] = field(default_factory=dict)


def _parse_float(text: str, line_number: int, column: str) -> Optional[float]:
    if text.strip() == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise ReportParseError(f"column {column!r} holds {text!r}, not a number", line_number)


def parse_report(text: str) -> ParsedReport:
    """Parse report CSV text; '#' lines carry 'key: value' metadata"""
    header: Dict[str, str] = {}
    columns: Optional[List[str]] = None
    rows: List[ReportRow] = []

    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
            continue
        fields = next(csv.reader([line]))
        if columns is None:
            missing = [c for c in REQUIRED_COLUMNS if c not in fields]
            if missing:
                raise ReportParseError(f"missing column(s): {', '.join(missing)}", line_number)
            if not any(c.endswith("_mean") for c in fields):
                raise ReportParseError("no '<metric>_mean' columns", line_number)
            columns = fields
            continue
        if len(fields) != len(columns):
            raise ReportParseError(f"expected {len(columns)} fields, found {len(fields)}", line_number)
        record = dict(zip(columns, fields))
        row = ReportRow(record["variant"], record["conditioning"], record.get("status", "ok") or "ok")
        for column in columns:
            if column.endswith("_mean") or column.endswith("_std"):
                row.values[column] = _parse_float(record[column], line_number, column)
        rows.append(row)

    if columns is None:
        raise ReportParseError("no column header found", max(1, len(text.splitlines())))
    metrics = [c[: -len("_mean")] for c in columns if c.endswith("_mean")]
    return ParsedReport(metrics=metrics, rows=rows, header=header)


def render_chart(report: ParsedReport, metric: str) -> Optional[Figure]:
    """Bar chart of one metric across cells; None when the column is empty"""
    present = [r for r in report.rows if r.values.get(f"{metric}_mean") is not None]
    if not present:
        return None
    means = [r.values[f"{metric}_mean"] for r in present]
    stds = [r.values.get(f"{metric}_std") or 0.0 for r in present]

    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(present) + 2.0), 4.0))
    positions = list(range(len(present)))
    ax.bar(positions, means, yerr=stds, capsize=3, color="#4c72b0")
    ax.set_xticks(positions)
    ax.set_xticklabels([r.label for r in present], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel(metric)
    ax.set_title(metric)
    fig.tight_layout()
    return fig


def cmd_plot(report_path: Union[str, Path], out_dir: Union[str, Path]) -> List[Path]:
    """
    Write <out_dir>/<metric>.svg for every metric column with at least one value

    Raises:
        ReportParseError: malformed CSV, with the offending line number
    """
    report = parse_report(Path(report_path).read_text(encoding='utf-8'))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        for metric in report.metrics:
            fig = render_chart(report, metric)
            if fig is None:
                logger.warning(f"Metric {metric} has no values; chart skipped")
                continue
            path = out / f"{metric}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    logger.info(f"Wrote {len(written)} chart(s) to {out}")
    return written
