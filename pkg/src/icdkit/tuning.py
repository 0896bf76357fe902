"""Decision-boundary selection by validation micro F1.

Sweeps a fixed grid of boundaries, evaluates micro and (arithmetic) macro
F1 at each point, and returns the smallest boundary attaining the best
micro F1. One global boundary per dataset; per-code thresholds are out of
scope.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from icdkit.errors import DataError
from icdkit.metrics import MetricPolicy, PredictionSet, confusion_counts, f1_macro, f1_micro

__all__ = ["BoundarySweep", "tune", "write_sweep_csv"]


@dataclass
class BoundarySweep:
    grid: list[float]
    micro_f1: list[float]
    macro_f1: list[float]
    best_boundary: float
    best_micro_f1: float

    def to_json_dict(self) -> dict:
        return {
            "grid": self.grid,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "best_boundary": self.best_boundary,
            "best_micro_f1": self.best_micro_f1,
        }


def boundary_grid(grid_step: float) -> list[float]:
    """{grid_step, 2*grid_step, ...} intersected with (0, 1)."""
    if not (0.0 < grid_step < 1.0):
        raise DataError(f"grid_step must lie in (0, 1), got {grid_step}")
    grid = []
    i = 1
    while True:
        b = i * grid_step
        if b >= 1.0 - 1e-12:
            break
        grid.append(b)
        i += 1
    return grid


def tune(
    preds_val: PredictionSet,
    grid_step: float = 0.01,
    macro_policy: MetricPolicy | None = None,
) -> BoundarySweep:
    """Evaluate micro/macro F1 at every grid point; argmax with smallest-boundary
    tie-break. ``macro_policy`` only controls the reported macro curve."""
    if preds_val.n_docs == 0 or preds_val.n_codes == 0:
        raise DataError("cannot tune on an empty prediction set")
    if macro_policy is None:
        macro_policy = MetricPolicy()
    grid = boundary_grid(grid_step)
    micro: list[float] = []
    macro: list[float] = []
    for b in grid:
        counts = confusion_counts(preds_val, b)
        micro.append(f1_micro(counts))
        macro.append(f1_macro(counts, macro_policy))
    best_index = max(range(len(grid)), key=lambda i: (micro[i], -i))
    return BoundarySweep(
        grid=grid,
        micro_f1=micro,
        macro_f1=macro,
        best_boundary=grid[best_index],
        best_micro_f1=micro[best_index],
    )


def write_sweep_csv(sweep: BoundarySweep, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["boundary", "micro_f1", "macro_f1"])
        for b, mi, ma in zip(sweep.grid, sweep.micro_f1, sweep.macro_f1):
            writer.writerow([repr(b), repr(mi), repr(ma)])
