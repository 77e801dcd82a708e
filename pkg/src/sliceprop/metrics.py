"""Dice metrics, decay curves, and run comparison tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .volume_io import MaskVolume


def _as_binary(arr: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if not np.isin(np.unique(a), (0, 1)).all():
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return a.astype(bool)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); defined as 1.0 when both masks are empty."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {p.shape} != gt shape {g.shape}")
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def per_slice_dice(pred: MaskVolume, gt: MaskVolume, threshold: float = 0.5) -> list[float]:
    """Dice per z slice; soft predictions are binarized at threshold."""
    p = pred.binarized(threshold).data
    g = gt.data
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {p.shape} != gt shape {g.shape}")
    return [dice(p[z], g[z]) for z in range(p.shape[0])]


def dice_decay_curve(
    pred: MaskVolume,
    gt: MaskVolume,
    annotated_index: int,
    skip_both_empty: bool = False,
) -> list[tuple[int, float]]:
    """Mean Dice grouped by |z - annotated_index|, ascending distance."""
    slice_scores = per_slice_dice(pred, gt)
    groups: dict[int, list[float]] = {}
    p = pred.binarized().data
    for z, score in enumerate(slice_scores):
        if skip_both_empty and p[z].sum() == 0 and gt.data[z].sum() == 0:
            continue
        groups.setdefault(abs(z - annotated_index), []).append(score)
    return [(d, float(np.mean(groups[d]))) for d in sorted(groups)]


@dataclass
class VolumeResult:
    volume_id: str
    family: str
    annotated_index: int
    slice_dice: list[float]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.slice_dice))


@dataclass
class RunResult:
    run_id: str
    config_digest: str
    volumes: list[VolumeResult] = field(default_factory=list)

    @property
    def volume_means(self) -> list[float]:
        return [v.mean_dice for v in self.volumes]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.volume_means))

    @property
    def std_dice(self) -> float:
        return float(np.std(self.volume_means))  # population std


def summarize_runs(results: list[RunResult]) -> list[dict]:
    """One row per run (scope "all") plus one per phantom family.

    Results sharing a run_id are pooled, which is how repeated seeds
    aggregate: pass one RunResult per seed with a common run_id.
    """
    if not results:
        raise ValueError("no run results to summarize")
    by_run: dict[str, list[VolumeResult]] = {}
    for res in results:
        by_run.setdefault(res.run_id, []).extend(res.volumes)
    rows = []
    for run_id in sorted(by_run):
        vols = by_run[run_id]
        scopes: dict[str, list[float]] = {"all": [v.mean_dice for v in vols]}
        for v in vols:
            scopes.setdefault(f"family:{v.family}", []).append(v.mean_dice)
        for scope in sorted(scopes):
            vals = scopes[scope]
            rows.append(
                {
                    "run": run_id,
                    "scope": scope,
                    "n": len(vals),
                    "mean_dice": float(np.mean(vals)),
                    "std_dice": float(np.std(vals)),
                }
            )
    return rows


def write_results_csv(results: list[RunResult], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run", "volume", "family", "z", "dice"])
        for res in results:
            for vol in res.volumes:
                for z, score in enumerate(vol.slice_dice):
                    writer.writerow(
                        [res.run_id, vol.volume_id, vol.family, z, f"{score:.9g}"]
                    )


def write_summary_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run", "scope", "n", "mean_dice", "std_dice"])
        for row in rows:
            writer.writerow(
                [
                    row["run"],
                    row["scope"],
                    row["n"],
                    f"{row['mean_dice']:.9g}",
                    f"{row['std_dice']:.9g}",
                ]
            )


def write_decay_csv(curves: dict[str, list[tuple[int, float]]], path) -> None:
    """curves maps run id -> [(distance, mean dice)]."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run", "distance", "mean_dice"])
        for run_id in sorted(curves):
            for distance, value in curves[run_id]:
                writer.writerow([run_id, distance, f"{value:.9g}"])


def mean_decay_curve(curves: list[list[tuple[int, float]]]) -> list[tuple[int, float]]:
    """Pointwise mean of several per-volume decay curves."""
    groups: dict[int, list[float]] = {}
    for curve in curves:
        for distance, value in curve:
            groups.setdefault(distance, []).append(value)
    return [(d, float(np.mean(groups[d]))) for d in sorted(groups)]
