"""
Reporting module: machine-readable artifacts and rich console summaries.

JSON reports and CSV tables are written atomically. Human-facing panels,
tables and training progress go to standard error so that standard output
stays free for machine-readable content.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import pandas as pd
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from src.utils import atomic_write, format_duration, format_ratio

logger = logging.getLogger("mars.reporting")

console = Console(stderr=True)

LOSS_COLUMNS = ["step", "lod", "bce", "commit"]


def write_json_report(report: dict[str, Any], path: str | Path) -> Path:
    """Write ``report`` as indented JSON (write-then-rename)."""
    with atomic_write(path) as f:
        json.dump(report, f, indent=2, ensure_ascii=False)
        f.write("\n")
    logger.info("JSON report written to: %s", path)
    return Path(path)


def write_table_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    with atomic_write(path) as f:
        frame.to_csv(f, index=False, lineterminator="\n")
    logger.info("Table written to: %s (%d rows)", path, len(frame))
    return Path(path)


def write_loss_csv(history: pd.DataFrame, path: str | Path) -> Path:
    """Per-step, per-LOD loss curve with header ``step,lod,bce,commit``."""
    missing = set(LOSS_COLUMNS) - set(history.columns)
    if missing:
        raise ValueError(f"Loss history is missing columns: {sorted(missing)}")
    return write_table_csv(history[LOSS_COLUMNS], path)


def training_progress(quiet: bool = False) -> Progress:
    """Progress bar for training loops, rendered on standard error."""
    return Progress(
        TextColumn("[bold cyan]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TextColumn("{task.fields[status]}"),
        TimeElapsedColumn(),
        console=console,
        transient=True,
        disable=quiet,
    )


def smoothed_curve(history: pd.DataFrame, column: str = "bce", window: int = 100) -> pd.DataFrame:
    """Rolling mean of ``column`` per LOD, indexed by step."""
    pivot = history.pivot_table(index="step", columns="lod", values=column)
    return pivot.rolling(window, min_periods=1).mean()


def print_dataset_summary(frame: pd.DataFrame, root: str | Path) -> None:
    table = Table(title=f"Dataset: {root}", header_style="bold bright_cyan", border_style="bright_blue")
    for column in frame.columns:
        table.add_column(str(column), justify="right" if frame[column].dtype.kind in "if" else "left")
    for row in frame.itertuples(index=False):
        table.add_row(*(str(v) for v in row))
    console.print(table)
    counts = frame["family"].value_counts().sort_index()
    console.print("  " + ", ".join(f"[bold]{family}[/bold]: {n}" for family, n in counts.items()))


def print_training_summary(title: str, history: pd.DataFrame, elapsed: float, checkpoint: str | Path | None) -> None:
    """Panel with the first and last loss of every LOD (or of the single AR curve)."""
    lines = [f"  [bold cyan]Steps[/bold cyan]      :  {int(history['step'].max()) if len(history) else 0}"]
    lines.append(f"  [bold cyan]Elapsed[/bold cyan]    :  {format_duration(elapsed)}")
    if checkpoint is not None:
        lines.append(f"  [bold cyan]Checkpoint[/bold cyan] :  {checkpoint}")
    if "lod" in history.columns and len(history):
        for lod, group in history.groupby("lod"):
            lines.append(
                f"  [bold]LOD {lod}[/bold] BCE   :  {group['bce'].iloc[0]:.4f} → [bold green]{group['bce'].iloc[-1]:.4f}[/bold green]"
            )
    elif len(history):
        lines.append(
            f"  [bold]Loss[/bold]       :  {history['loss'].iloc[0]:.4f} → [bold green]{history['loss'].iloc[-1]:.4f}[/bold green]"
        )
    console.print(Panel("\n".join(lines), title=f"[bold white]{title}[/bold white]", border_style="bright_blue", padding=(1, 2)))


def print_eval_report(report: dict[str, Any]) -> None:
    table = Table(title="Detailization metrics", header_style="bold bright_cyan", border_style="bright_blue", show_lines=True)
    table.add_column("Metric", style="bold white")
    table.add_column("Value", style="bold yellow", justify="right")
    for key in ("strict_iou", "loose_iou", "f_score"):
        table.add_row(key, format_ratio(report[key]))
    table.add_row("resolution", str(report["resolution"]))
    table.add_row("tau", f"{report['tau']:g}")
    console.print(table)


def print_ablation_table(study: str, frame: pd.DataFrame) -> None:
    table = Table(title=f"Ablation: {study}", header_style="bold bright_cyan", border_style="bright_blue", show_lines=True)
    for column in frame.columns:
        table.add_column(str(column), justify="right" if frame[column].dtype.kind in "if" else "left")
    for row in frame.itertuples(index=False):
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    console.print(table)
