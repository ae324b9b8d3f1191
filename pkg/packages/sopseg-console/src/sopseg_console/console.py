from typing import Optional

from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn, TimeRemainingColumn
from rich.table import Table

from sopseg.api import TrainingObserver
from sopseg.cli_lib import AblationResult, ReviewList
from sopseg.config import ResolvedConfig
from sopseg.evaluation import EvalReport
from sopseg.training import EpochRecord, FitResult


class ConsoleObserver(TrainingObserver):
    """Shows training progress as a rich progress bar and prints one summary line per epoch."""

    def __init__(self, console: Console):
        self._console = console
        self._progress: Optional[Progress] = None
        self._task = None

    def on_train_start(self, total_steps: int, start_step: int) -> None:
        self._progress = Progress(
            TextColumn("[bold]training"),
            BarColumn(),
            MofNCompleteColumn(),
            TextColumn("loss {task.fields[loss]}"),
            TimeElapsedColumn(),
            TimeRemainingColumn(),
            console=self._console,
            transient=True,
        )
        self._progress.start()
        self._task = self._progress.add_task("train", total=total_steps, completed=start_step, loss="-")

    def on_step(self, step: int, loss: float) -> None:
        if self._progress is not None:
            self._progress.update(self._task, completed=step, loss=f"{loss:.4f}")

    def on_epoch_end(self, record: EpochRecord) -> None:
        val = "" if record.val_miou is None else f"  val mIoU {record.val_miou:.4f}  mBIoU {record.val_mbiou:.4f}"
        self._console.print(f"epoch {record.epoch + 1}: loss {record.train_loss:.4f}{val}  ({record.seconds:.1f}s)")

    def on_train_end(self, result: FitResult) -> None:
        if self._progress is not None:
            self._progress.stop()
            self._progress = None
        best = "n/a" if result.best_miou is None else f"{result.best_miou:.4f}"
        self._console.print(f"[bold]done[/bold]: {result.global_step} steps, best val mIoU {best} "
                            f"(epoch {result.best_epoch}), checkpoint {result.best_checkpoint}")


def render_report(console: Console, report: EvalReport) -> None:
    table = Table(title=f"Evaluation ({report.n_instances} instances)")
    table.add_column("class")
    table.add_column("IoU", justify="right")
    table.add_column("BIoU", justify="right")
    table.add_column("count", justify="right")
    for name, metrics in report.per_class.items():
        table.add_row(name, f"{metrics.iou:.4f}", f"{metrics.biou:.4f}", str(metrics.count))
    table.add_section()
    table.add_row("[bold]mean", f"[bold]{report.miou:.4f}", f"[bold]{report.mbiou:.4f}", str(report.n_instances))
    table.add_section()
    for name, metrics in report.per_size.items():
        table.add_row(f"size: {name}", f"{metrics.iou:.4f}", f"{metrics.biou:.4f}", str(metrics.count))
    console.print(table)


def render_provenance(console: Console, resolved: ResolvedConfig, only_changed: bool = True) -> None:
    """Lists configuration values with their origin; defaults are hidden unless `only_changed` is off."""
    flat = _flatten(resolved.config.model_dump(mode='json'))
    table = Table(title="Configuration")
    table.add_column("key")
    table.add_column("value")
    table.add_column("source")
    for key, source in sorted(resolved.provenance.items()):
        if only_changed and source == 'default':
            continue
        table.add_row(key, str(flat.get(key)), source)
    console.print(table)


def render_review(console: Console, review: ReviewList) -> None:
    table = Table(title=f"Flagged for review (predicted IoU < {review.tau})")
    table.add_column("instance")
    table.add_column("image")
    table.add_column("class")
    table.add_column("IoU pred", justify="right")
    for entry in review.flagged:
        table.add_row(entry.id, entry.image_id, entry.class_label, f"{entry.iou_pred:.3f}")
    console.print(table)
    for skipped in review.skipped:
        where = "" if skipped.line is None else f" (line {skipped.line})"
        console.print(f"[yellow]skipped[/yellow] {skipped.id}{where}: {skipped.reason}")


def render_ablation(console: Console, result: AblationResult) -> None:
    table = Table(title="Edge supervision ablation")
    table.add_column("edge")
    table.add_column("seed", justify="right")
    table.add_column("mIoU", justify="right")
    table.add_column("mBIoU", justify="right")
    for run in result.runs:
        table.add_row("on" if run.edge_supervision else "off", str(run.seed), f"{run.miou:.4f}", f"{run.mbiou:.4f}")
    table.add_section()
    for name, values in result.mean.items():
        table.add_row(f"[bold]{name}", "mean", f"{values['miou']:.4f}", f"{values['mbiou']:.4f}")
    console.print(table)


def _flatten(data, prefix: str = ''):
    result = {}
    for key, value in data.items():
        if isinstance(value, dict):
            result.update(_flatten(value, f"{prefix}{key}."))
        else:
            result[f"{prefix}{key}"] = value
    return result
