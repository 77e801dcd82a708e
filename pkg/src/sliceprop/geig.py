"""Gradient-enhanced slice representations.

A raw slice becomes a per-pixel channel stack: an optional min-max normalized
intensity channel followed by softmax-normalized derivative responses. The
second-order variant computes central second differences in d directions at s
scales; the first-order variant (the bootstrap's information bottleneck) uses
central first differences at a single scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

# direction label -> (dy, dx) lattice step; diagonals are not renormalized
DIRECTION_STEPS = {
    "horizontal": (0, 1),
    "vertical": (1, 0),
    "diag_up": (-1, 1),
    "diag_down": (1, 1),
}
DEFAULT_DIRECTIONS = ("horizontal", "vertical", "diag_up", "diag_down")


@dataclass
class GeigConfig:
    directions: tuple[str, ...] = DEFAULT_DIRECTIONS
    scales: tuple[int, ...] = (3, 5)
    include_intensity: bool = True

    def __post_init__(self):
        self.directions = tuple(self.directions)
        self.scales = tuple(int(s) for s in self.scales)
        if len(self.directions) < 1 or len(self.scales) < 1:
            raise ValueError("need at least one direction and one scale")
        for name in self.directions:
            if name not in DIRECTION_STEPS:
                raise ValueError(f"unknown direction {name!r}")
        for s in self.scales:
            if s < 3 or s % 2 == 0:
                raise ValueError(f"scales must be odd and >= 3, got {s}")

    @property
    def channels(self) -> int:
        return int(self.include_intensity) + len(self.directions) * len(self.scales)


@dataclass
class GradientEnhancedSlice:
    """H x W x C channel stack; channel 0 is intensity when has_intensity."""

    data: np.ndarray
    has_intensity: bool = True

    @property
    def derivative_channels(self) -> np.ndarray:
        return self.data[..., 1:] if self.has_intensity else self.data


def minmax_normalize(slice_: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant slice maps to all zeros."""
    x = np.asarray(slice_, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _check_scale(slice_: np.ndarray, scale: int) -> None:
    if scale % 2 == 0 or scale < 3:
        raise ValueError(f"scale must be odd and >= 3, got {scale}")
    if scale >= 2 * min(slice_.shape):
        raise ValueError(
            f"scale {scale} too large for slice of shape {slice_.shape}"
        )


def _shift(slice_: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """slice_[y + dy, x + dx] with reflect padding at the borders."""
    py, px = abs(dy), abs(dx)
    padded = np.pad(slice_, ((py, py), (px, px)), mode="reflect")
    h, w = slice_.shape
    return padded[py + dy : py + dy + h, px + dx : px + dx + w]


def second_derivative(slice_: np.ndarray, direction: str, scale: int) -> np.ndarray:
    """Central second difference with step h = (scale - 1) / 2 along a direction."""
    slice_ = np.asarray(slice_, dtype=np.float64)
    if slice_.ndim != 2:
        raise ShapeError(f"expected a 2D slice, got ndim={slice_.ndim}")
    _check_scale(slice_, scale)
    dy, dx = DIRECTION_STEPS[direction]
    h = (scale - 1) // 2
    return (
        _shift(slice_, h * dy, h * dx)
        - 2.0 * slice_
        + _shift(slice_, -h * dy, -h * dx)
    )


def first_derivative(slice_: np.ndarray, direction: str, scale: int) -> np.ndarray:
    """Central first difference I(p + h*dir) - I(p - h*dir), h = (scale - 1) / 2."""
    slice_ = np.asarray(slice_, dtype=np.float64)
    if slice_.ndim != 2:
        raise ShapeError(f"expected a 2D slice, got ndim={slice_.ndim}")
    _check_scale(slice_, scale)
    dy, dx = DIRECTION_STEPS[direction]
    h = (scale - 1) // 2
    return _shift(slice_, h * dy, h * dx) - _shift(slice_, -h * dy, -h * dx)


def _softmax_channels(stack: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    shifted = stack - stack.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _assemble(slice_: np.ndarray, responses: list[np.ndarray], include_intensity: bool):
    channels = _softmax_channels(np.stack(responses, axis=-1))
    if include_intensity:
        channels = np.concatenate(
            [minmax_normalize(slice_)[..., None], channels], axis=-1
        )
    return GradientEnhancedSlice(np.ascontiguousarray(channels), include_intensity)


def geig_transform(slice_: np.ndarray, cfg: GeigConfig) -> GradientEnhancedSlice:
    """Per pixel: softmax over all d*s second-derivative responses, intensity prepended.

    Channel order after the intensity channel is direction-major: all scales of
    direction 0, then all scales of direction 1, ...
    """
    slice_ = np.asarray(slice_, dtype=np.float64)
    responses = [
        second_derivative(slice_, direction, scale)
        for direction in cfg.directions
        for scale in cfg.scales
    ]
    return _assemble(slice_, responses, cfg.include_intensity)


def edge_profile(
    slice_: np.ndarray,
    window: int = 3,
    directions: tuple[str, ...] = DEFAULT_DIRECTIONS,
    include_intensity: bool = True,
) -> GradientEnhancedSlice:
    """First-order counterpart of geig_transform at a single scale = window."""
    slice_ = np.asarray(slice_, dtype=np.float64)
    responses = [first_derivative(slice_, d, window) for d in directions]
    return _assemble(slice_, responses, include_intensity)


@dataclass
class FeatureSpec:
    """Which slice representation feeds the encoder.

    kind "edge_profile" is the bootstrap bottleneck (first-order, one scale);
    kind "geig" is the second-order multi-scale stack. Pseudo-label slices go
    through the same transform so one encoder serves both paths.
    """

    kind: str = "geig"  # "geig" | "edge_profile"
    geig: GeigConfig = field(default_factory=GeigConfig)
    edge_window: int = 3

    def __post_init__(self):
        if self.kind not in ("geig", "edge_profile"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.edge_window < 3 or self.edge_window % 2 == 0:
            raise ValueError(f"edge_window must be odd and >= 3, got {self.edge_window}")

    @property
    def channels(self) -> int:
        if self.kind == "geig":
            return self.geig.channels
        return int(self.geig.include_intensity) + len(self.geig.directions)

    def apply(self, slice_: np.ndarray) -> GradientEnhancedSlice:
        if self.kind == "geig":
            return geig_transform(slice_, self.geig)
        return edge_profile(
            slice_,
            window=self.edge_window,
            directions=self.geig.directions,
            include_intensity=self.geig.include_intensity,
        )
