"""Bidirectional mask propagation from a single annotated slice.

The chain walks outward from the annotated slice in both directions. For each
step the affinity from the source slice to its neighbor is computed fresh from
the trained encoder; the soft mask is carried through as a convex combination
and binarized once at the end (per-step binarization is available as an
ablation flag).

No pseudo-labels enter here. In dual_reuse_prev mode the running propagated
estimate of the source slice stands in for both PL-path inputs; dual_zero_pl
feeds an all-zero mask instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .correspondence import FeatureMap, WindowSpec, compute_affinity, apply_affinity
from .encoder import EncoderParams, encode
from .errors import ConfigError, EmptyMaskError, ShapeError
from .geig import FeatureSpec
from .volume_io import MaskVolume, Volume

PROPAGATION_MODES = ("single_path", "dual_reuse_prev", "dual_zero_pl")


@dataclass
class PropagationConfig:
    mode: str = "dual_reuse_prev"
    window: WindowSpec = field(default_factory=WindowSpec)
    per_step_binarize: bool = False
    output_threshold: float = 0.5
    features: FeatureSpec = field(default_factory=FeatureSpec)

    def __post_init__(self):
        if self.mode not in PROPAGATION_MODES:
            raise ConfigError(f"unknown propagation mode {self.mode!r}")
        if not (0.0 < self.output_threshold < 1.0):
            raise ConfigError(
                f"output_threshold must lie strictly in (0, 1), got "
                f"{self.output_threshold}"
            )


@dataclass
class TraceRow:
    direction: str  # "start" | "forward" | "backward"
    z: int
    soft_mass: float
    max_value: float
    dice: float | None = None


def _check_inputs(params, volume, annotated_index, annotated_mask, cfg):
    d, h, w = volume.data.shape
    if not (0 <= annotated_index < d):
        raise ValueError(
            f"annotated_index {annotated_index} out of range for D={d}"
        )
    mask = np.asarray(annotated_mask)
    if mask.shape != (h, w):
        raise ShapeError(f"annotated mask shape {mask.shape} != slice shape {(h, w)}")
    if not np.isin(np.unique(mask), (0, 1)).all():
        raise ValueError("annotated mask must be binary")
    if mask.sum() == 0:
        raise EmptyMaskError("annotated mask is empty")
    if cfg.features.channels != params.config.in_channels:
        raise ConfigError(
            f"feature transform emits {cfg.features.channels} channels but the "
            f"encoder expects {params.config.in_channels}"
        )
    cfg.window.check_fits(h, w)
    return mask.astype(np.float64)


def _step_affinity(params, cfg, slice_src, slice_tgt, current_estimate):
    """Affinity from the source slice to the target slice for one chain step."""
    tf = cfg.features
    key = encode(params, tf.apply(slice_src))
    query = encode(params, tf.apply(slice_tgt))
    if cfg.mode == "single_path":
        return compute_affinity(key, query, cfg.window)
    if cfg.mode == "dual_reuse_prev":
        pl_input = current_estimate
    else:  # dual_zero_pl
        pl_input = np.zeros_like(current_estimate)
    # the same estimate stands in for both PL-path inputs, so one encode serves
    # both the key and the query side
    pl_feat = encode(params, tf.apply(pl_input)).data
    key = FeatureMap(np.concatenate([key.data, pl_feat], axis=-1))
    query = FeatureMap(np.concatenate([query.data, pl_feat], axis=-1))
    return compute_affinity(key, query, cfg.window)


def _propagate(params, volume, annotated_index, annotated_mask, cfg, gt=None):
    mask0 = _check_inputs(params, volume, annotated_index, annotated_mask, cfg)
    d = volume.data.shape[0]
    soft = np.zeros(volume.data.shape, dtype=np.float64)
    soft[annotated_index] = mask0
    gt_data = None if gt is None else np.asarray(gt.data)

    def _dice_at(z):
        if gt_data is None:
            return None
        pred = soft[z] >= cfg.output_threshold
        g = gt_data[z] > 0
        denom = pred.sum() + g.sum()
        return 1.0 if denom == 0 else float(2.0 * np.logical_and(pred, g).sum() / denom)

    rows = [
        TraceRow(
            "start",
            annotated_index,
            float(mask0.sum()),
            float(mask0.max()),
            _dice_at(annotated_index),
        )
    ]

    vol64 = volume.data.astype(np.float64)

    def _walk(indices, direction):
        for src, tgt in indices:
            aff = _step_affinity(params, cfg, vol64[src], vol64[tgt], soft[src])
            nxt = np.clip(apply_affinity(aff, soft[src]), 0.0, 1.0)
            if cfg.per_step_binarize:
                nxt = (nxt >= cfg.output_threshold).astype(np.float64)
            soft[tgt] = nxt
            rows.append(
                TraceRow(direction, tgt, float(nxt.sum()), float(nxt.max()), _dice_at(tgt))
            )

    _walk([(i, i + 1) for i in range(annotated_index, d - 1)], "forward")
    _walk([(i, i - 1) for i in range(annotated_index, 0, -1)], "backward")
    soft[annotated_index] = mask0
    return soft, rows


def propagate_with_trace(
    params: EncoderParams,
    volume: Volume,
    annotated_index: int,
    annotated_mask: np.ndarray,
    cfg: PropagationConfig,
    gt: MaskVolume | None = None,
) -> tuple[MaskVolume, MaskVolume, list[TraceRow]]:
    """One chain pass returning (soft, binary, per-step trace rows)."""
    soft, rows = _propagate(params, volume, annotated_index, annotated_mask, cfg, gt=gt)
    soft_mask = MaskVolume(soft.astype(np.float32), kind="soft")
    binary = MaskVolume(
        (soft >= cfg.output_threshold).astype(np.uint8), kind="binary"
    )
    return soft_mask, binary, rows


def propagate_volume(
    params: EncoderParams,
    volume: Volume,
    annotated_index: int,
    annotated_mask: np.ndarray,
    cfg: PropagationConfig,
) -> tuple[MaskVolume, MaskVolume]:
    """Chain the annotated slice through the whole volume.

    Returns (soft, binary) MaskVolumes; the annotated slice is reproduced
    bit-exactly in both.
    """
    soft_mask, binary, _ = propagate_with_trace(
        params, volume, annotated_index, annotated_mask, cfg
    )
    return soft_mask, binary


def propagation_trace(
    params: EncoderParams,
    volume: Volume,
    annotated_index: int,
    annotated_mask: np.ndarray,
    cfg: PropagationConfig,
    gt: MaskVolume | None = None,
) -> list[TraceRow]:
    """Per-step diagnostics: (direction, z, soft mass, max value[, dice])."""
    _, rows = _propagate(params, volume, annotated_index, annotated_mask, cfg, gt=gt)
    return rows


def write_trace_csv(rows: list[TraceRow], path, volume_id: str | None = None) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["direction", "z", "soft_mass", "max_value", "dice"]
        if volume_id is not None:
            header = ["volume"] + header
        writer.writerow(header)
        for row in rows:
            fields = [
                row.direction,
                row.z,
                f"{row.soft_mass:.9g}",
                f"{row.max_value:.9g}",
                "" if row.dice is None else f"{row.dice:.9g}",
            ]
            if volume_id is not None:
                fields = [volume_id] + fields
            writer.writerow(fields)
