#!/usr/bin/env python3
"""
Benchmark and EV-interval report files: CSV, workbook, JSON summary, PDF summary and runtime plots.
"""

import logging
import math
from datetime import datetime, timezone
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
from fpdf import FPDF

from artifacts import write_json
from pipeline import BenchmarkReport, IntervalResult

logger = logging.getLogger(__name__)

REPORT_TITLE = "EV Joint Routing and Scheduling Benchmark"
FIXED_CREATION_DATE = datetime(2000, 1, 1, tzinfo=timezone.utc)


class ReportPDF(FPDF):
    def __init__(self, title=REPORT_TITLE, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.title_text = title

    def header(self):
        if self.title_text:
            self.set_font('Arial', 'I', 10)
            self.set_text_color(80, 80, 80)
            self.cell(0, 10, self.title_text, 0, 0, 'R')
            self.ln(5)
            self.set_text_color(0, 0, 0)


def _fmt(value, digits=2):
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.{digits}f}"
    return str(value)


SUMMARY_LABELS = [
    ("samples", "Samples"),
    ("r_bar", "Mean time reduction (%)"),
    ("r_bar_with_overhead", "Mean time reduction incl. failed attempts (%)"),
    ("l_bar", "Mean objective gap (%)"),
    ("feas", "Assisted feasibility (%)"),
    ("acc0", "Acc_0 (%)"),
    ("acc1", "Acc_1 (%)"),
    ("map", "mAP (%)"),
    ("p0", "Threshold p0"),
    ("p1", "Threshold p1"),
]


def generate_pdf(report: BenchmarkReport, title: str = REPORT_TITLE) -> bytes:
    pdf = ReportPDF(title)
    if hasattr(pdf, "set_creation_date"):
        pdf.set_creation_date(FIXED_CREATION_DATE)
    pdf.set_auto_page_break(auto=True, margin=15)
    pdf.add_page()
    pdf.set_font('Arial', 'B', 16)
    pdf.cell(0, 10, title, ln=True, align='C')
    pdf.ln(5)

    pdf.set_font('Arial', 'B', 14)
    pdf.cell(0, 10, 'Summary:', ln=True)
    pdf.set_font('Arial', '', 12)
    for key, label in SUMMARY_LABELS:
        if key in report.summary:
            digits = 4 if key in ("p0", "p1") else 2
            pdf.cell(0, 8, f"{label}: {_fmt(report.summary[key], digits)}", ln=True)
    pdf.ln(5)

    headers = ["Instance", "EVs", "Base s", "Assist s", "Base obj", "Assist obj", "Feas", "Retries"]
    col_widths = [44, 12, 22, 22, 26, 26, 14, 18]
    pdf.set_font('Arial', 'B', 9)
    for w, h in zip(col_widths, headers):
        pdf.cell(w, 8, h, border=1, align='C')
    pdf.ln()
    pdf.set_font('Arial', '', 9)
    for r in report.rows:
        pdf.cell(col_widths[0], 7, r.name[:24], border=1)
        pdf.cell(col_widths[1], 7, str(r.evs), border=1, align='C')
        pdf.cell(col_widths[2], 7, _fmt(r.baseline_seconds), border=1, align='R')
        pdf.cell(col_widths[3], 7, _fmt(r.assisted_seconds), border=1, align='R')
        pdf.cell(col_widths[4], 7, _fmt(r.baseline_objective), border=1, align='R')
        pdf.cell(col_widths[5], 7, _fmt(r.assisted_objective), border=1, align='R')
        pdf.cell(col_widths[6], 7, _fmt(r.feasible), border=1, align='C')
        pdf.cell(col_widths[7], 7, str(r.retries), border=1, align='C')
        pdf.ln()

    pdf_bytes = pdf.output(dest='S')
    if isinstance(pdf_bytes, str):
        pdf_bytes = pdf_bytes.encode('latin-1')
    return bytes(pdf_bytes)


def plot_runtimes(report: BenchmarkReport, path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(8, 4))
    x = range(len(report.rows))
    ax.bar([i - 0.2 for i in x], [r.baseline_seconds for r in report.rows], width=0.4, label="baseline")
    ax.bar([i + 0.2 for i in x], [r.assisted_seconds for r in report.rows], width=0.4, label="assisted")
    ax.set_xticks(list(x))
    ax.set_xticklabels([r.name for r in report.rows], rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("solve time (s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_workbook(report: BenchmarkReport, path: str | Path) -> Path:
    """Samples and Summary sheets."""
    path = Path(path)
    summary = pd.DataFrame([{"metric": k, "value": v} for k, v in sorted(report.summary.items())])
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        pd.DataFrame(report.to_records()).to_excel(writer, index=False, sheet_name="Samples")
        summary.to_excel(writer, index=False, sheet_name="Summary")
    return path


def write_benchmark_report(report: BenchmarkReport, out_dir: str | Path) -> dict[str, Path]:
    """report.csv, report.xlsx, summary.json, report.pdf and runtimes.png under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "report.csv", "workbook": out_dir / "report.xlsx",
             "summary": out_dir / "summary.json", "pdf": out_dir / "report.pdf", "plot": out_dir / "runtimes.png"}
    pd.DataFrame(report.to_records()).to_csv(paths["csv"], index=False)
    write_workbook(report, paths["workbook"])
    write_json(paths["summary"], report.summary)
    with open(paths["pdf"], "wb") as f:
        f.write(generate_pdf(report))
    plot_runtimes(report, paths["plot"])
    logger.info("Benchmark report written to %s", out_dir)
    return paths


# ---------------------------------------------------------------------------
# EV-interval study
# ---------------------------------------------------------------------------

INTERVAL_COLUMNS = ["model", "interval", "samples", "acc0", "acc1", "map", "p0", "p1", "r_bar", "l_bar", "feas"]


def interval_table(results: list[IntervalResult]) -> pd.DataFrame:
    """One row per interval model; thresholds in percent like the accuracies."""
    return pd.DataFrame([r.table_row() for r in results], columns=INTERVAL_COLUMNS)


def interval_samples(results: list[IntervalResult]) -> pd.DataFrame:
    frames = [pd.DataFrame(r.report.to_records()).assign(model=r.label) for r in results]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def generate_interval_pdf(table: pd.DataFrame, title: str = "EV-Interval Study") -> bytes:
    pdf = ReportPDF(title)
    if hasattr(pdf, "set_creation_date"):
        pdf.set_creation_date(FIXED_CREATION_DATE)
    pdf.add_page()
    pdf.set_font('Arial', 'B', 16)
    pdf.cell(0, 10, title, ln=True, align='C')
    pdf.ln(5)

    headers = ["Model", "Acc_0", "Acc_1", "mAP", "p0", "p1", "r_bar", "l_bar", "Feas"]
    keys = ["model", "acc0", "acc1", "map", "p0", "p1", "r_bar", "l_bar", "feas"]
    col_widths = [26] + [20] * 8
    pdf.set_font('Arial', 'B', 9)
    for w, h in zip(col_widths, headers):
        pdf.cell(w, 8, h, border=1, align='C')
    pdf.ln()
    pdf.set_font('Arial', '', 9)
    for record in table.to_dict("records"):
        for w, key in zip(col_widths, keys):
            value = record[key]
            pdf.cell(w, 7, _fmt(float(value) if key != "model" else value), border=1,
                     align='L' if key == "model" else 'R')
        pdf.ln()

    pdf_bytes = pdf.output(dest='S')
    if isinstance(pdf_bytes, str):
        pdf_bytes = pdf_bytes.encode('latin-1')
    return bytes(pdf_bytes)


def plot_interval_runtimes(results: list[IntervalResult], path: str | Path) -> Path:
    """Box plot of assisted solve times per interval model next to the shared baseline."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(8, 4))
    series = [[row.baseline_seconds for row in results[0].report.rows]] if results else []
    series += [[row.assisted_seconds for row in r.report.rows] for r in results]
    labels = (["baseline"] if results else []) + [r.label for r in results]
    if series:
        ax.boxplot(series)
        ax.set_xticks(range(1, len(labels) + 1))
        ax.set_xticklabels(labels)
    ax.set_ylabel("solve time (s)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_interval_report(results: list[IntervalResult], out_dir: str | Path) -> dict[str, Path]:
    """intervals.csv, intervals.xlsx, summary.json, intervals.pdf and runtimes.png under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "intervals.csv", "workbook": out_dir / "intervals.xlsx",
             "summary": out_dir / "summary.json", "pdf": out_dir / "intervals.pdf", "plot": out_dir / "runtimes.png"}
    table = interval_table(results)
    table.to_csv(paths["csv"], index=False)
    with pd.ExcelWriter(paths["workbook"], engine="openpyxl") as writer:
        table.to_excel(writer, index=False, sheet_name="Intervals")
        interval_samples(results).to_excel(writer, index=False, sheet_name="Samples")
    write_json(paths["summary"], {"models": table.to_dict("records"),
                                  "ev_counts": {r.label: list(r.ev_counts) for r in results}})
    with open(paths["pdf"], "wb") as f:
        f.write(generate_interval_pdf(table))
    plot_interval_runtimes(results, paths["plot"])
    logger.info("Interval study report written to %s", out_dir)
    return paths
