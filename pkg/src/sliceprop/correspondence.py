"""Local-window affinity between two feature maps, and its application.

For each target pixel u the affinity row is a softmax over the dot products
<query(u), key(v)> for source pixels v inside the (2r+1)^2 window around u,
clipped at the borders. Rows are stored dense over the window slots in
row-major offset order (dy-major, then dx); clipped slots hold weight 0 and
never receive probability mass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .encoder import EncoderParams, FeatureMap, encode
from .errors import FormatError, PersistenceError, ShapeError
from .geig import GradientEnhancedSlice

_NEG_INF = -np.inf


@dataclass
class WindowSpec:
    """Search window of (2r+1)^2 candidate source pixels per target pixel."""

    radius: int = 7

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"window radius must be >= 0, got {self.radius}")

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def n_slots(self) -> int:
        return self.side * self.side

    def offsets(self):
        """(dy, dx) per slot in row-major order."""
        r = self.radius
        return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]

    def check_fits(self, h: int, w: int) -> None:
        if self.side > min(h, w):
            raise ShapeError(
                f"window side {self.side} exceeds min spatial dim of ({h}, {w})"
            )


def window_validity(h: int, w: int, radius: int) -> np.ndarray:
    """Boolean (H, W, K): slot k of pixel (y, x) lies inside the image."""
    r = radius
    ys = np.arange(h)[:, None, None]
    xs = np.arange(w)[None, :, None]
    dys = np.repeat(np.arange(-r, r + 1), 2 * r + 1)[None, None, :]
    dxs = np.tile(np.arange(-r, r + 1), 2 * r + 1)[None, None, :]
    vy = (ys + dys >= 0) & (ys + dys < h)
    vx = (xs + dxs >= 0) & (xs + dxs < w)
    return vy & vx


@dataclass
class AffinityMatrix:
    """Window-sparse row-stochastic weights; weights[y, x, k] pairs target
    (y, x) with source (y + dy_k, x + dx_k)."""

    weights: np.ndarray  # (H, W, K) float64, zeros at clipped slots
    radius: int

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.weights.shape[:2]

    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=-1)


def compute_affinity(key: FeatureMap, query: FeatureMap, win: WindowSpec) -> AffinityMatrix:
    """Row-wise softmax of windowed query/key dot products (max-subtracted)."""
    k_data, q_data = key.data, query.data
    if k_data.shape != q_data.shape:
        raise ShapeError(
            f"key shape {k_data.shape} != query shape {q_data.shape}"
        )
    h, w, _ = k_data.shape
    win.check_fits(h, w)
    r = win.radius
    padded = np.pad(k_data.astype(np.float64), ((r, r), (r, r), (0, 0)))
    q64 = q_data.astype(np.float64)
    logits = np.empty((h, w, win.n_slots), dtype=np.float64)
    for slot, (dy, dx) in enumerate(win.offsets()):
        shifted = padded[r + dy : r + dy + h, r + dx : r + dx + w]
        logits[:, :, slot] = np.einsum("hwf,hwf->hw", q64, shifted)
    valid = window_validity(h, w, r)
    logits[~valid] = _NEG_INF
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits, where=valid, out=np.zeros_like(logits))
    e /= e.sum(axis=-1, keepdims=True)
    return AffinityMatrix(e, r)


def affinity_backward(
    key: FeatureMap,
    query: FeatureMap,
    aff: AffinityMatrix,
    d_weights: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through the windowed softmax.

    Given dL/dA (H, W, K), returns (dL/dkey, dL/dquery), each (H, W, F).
    Clipped slots carry zero affinity, so they contribute no gradient.
    """
    a = aff.weights
    if d_weights.shape != a.shape:
        raise ShapeError(f"d_weights shape {d_weights.shape} != affinity {a.shape}")
    h, w, n_slots = a.shape
    r = aff.radius
    side = 2 * r + 1
    # softmax backward per row: dlogit = a * (dA - sum_j dA_j a_j)
    inner = (d_weights * a).sum(axis=-1, keepdims=True)
    dlogits = a * (d_weights - inner)
    k64 = key.data.astype(np.float64)
    q64 = query.data.astype(np.float64)
    padded_key = np.pad(k64, ((r, r), (r, r), (0, 0)))
    # d_query(u) = sum_slot dlogits(u, slot) key(u + off_slot)
    win_view = sliding_window_view(padded_key, (side, side), axis=(0, 1))
    d_query = np.einsum(
        "hwfij,hwij->hwf",
        win_view,
        dlogits.reshape(h, w, side, side),
        optimize=True,
    )
    # d_key is a scatter over window offsets of dlogits(u, slot) * query(u)
    d_key_padded = np.zeros_like(padded_key)
    for slot, (dy, dx) in enumerate(WindowSpec(r).offsets()):
        d_key_padded[r + dy : r + dy + h, r + dx : r + dx + w] += (
            dlogits[:, :, slot : slot + 1] * q64
        )
    return d_key_padded[r : r + h, r : r + w], d_query


def apply_affinity(aff: AffinityMatrix, values: np.ndarray) -> np.ndarray:
    """Per target pixel, the convex combination of source values under the row.

    values is (H, W) or (H, W, C); the output shape matches.
    """
    squeeze = values.ndim == 2
    v = values[..., None] if squeeze else values
    h, w, _ = v.shape
    if aff.spatial_shape != (h, w):
        raise ShapeError(
            f"affinity spatial shape {aff.spatial_shape} != values {(h, w)}"
        )
    r = aff.radius
    padded = np.pad(v.astype(np.float64), ((r, r), (r, r), (0, 0)))
    out = np.zeros((h, w, v.shape[2]), dtype=np.float64)
    for slot, (dy, dx) in enumerate(WindowSpec(r).offsets()):
        out += aff.weights[:, :, slot : slot + 1] * padded[
            r + dy : r + dy + h, r + dx : r + dx + w
        ]
    return out[..., 0] if squeeze else out


def apply_affinity_backward_values(aff: AffinityMatrix, d_out: np.ndarray) -> np.ndarray:
    """dL/dvalues given dL/doutput; transpose of apply_affinity."""
    squeeze = d_out.ndim == 2
    g = d_out[..., None] if squeeze else d_out
    h, w, c = g.shape
    r = aff.radius
    d_padded = np.zeros((h + 2 * r, w + 2 * r, c), dtype=np.float64)
    for slot, (dy, dx) in enumerate(WindowSpec(r).offsets()):
        d_padded[r + dy : r + dy + h, r + dx : r + dx + w] += (
            aff.weights[:, :, slot : slot + 1] * g
        )
    d_values = d_padded[r : r + h, r : r + w]
    return d_values[..., 0] if squeeze else d_values


def fuse_keys_queries(slice_feat: FeatureMap, pl_feat: FeatureMap) -> FeatureMap:
    """Channel-wise concatenation: slice features first, then PL features."""
    if slice_feat.spatial_shape != pl_feat.spatial_shape:
        raise ShapeError(
            f"spatial shapes differ: {slice_feat.spatial_shape} vs "
            f"{pl_feat.spatial_shape}"
        )
    return FeatureMap(np.concatenate([slice_feat.data, pl_feat.data], axis=-1))


def oeg_affinity(
    params: EncoderParams,
    slice_j: GradientEnhancedSlice,
    slice_j1: GradientEnhancedSlice,
    pl_j: GradientEnhancedSlice,
    pl_j1: GradientEnhancedSlice,
    win: WindowSpec,
) -> AffinityMatrix:
    """Dual-path affinity: both paths share one set of encoder parameters.

    key = [encode(slice_j), encode(pl_j)], query = [encode(slice_j1),
    encode(pl_j1)]; the affinity is computed from the fused features.
    """
    key = fuse_keys_queries(encode(params, slice_j), encode(params, pl_j))
    query = fuse_keys_queries(encode(params, slice_j1), encode(params, pl_j1))
    return compute_affinity(key, query, win)


# ---------------------------------------------------------------------------
# debug dump


def dump_affinity(aff: AffinityMatrix, path) -> None:
    """Header JSON line + per-row valid weights, f32, window row-major order."""
    h, w = aff.spatial_shape
    valid = window_validity(h, w, aff.radius)
    payload = aff.weights[valid].astype("<f4").tobytes()
    header = {"shape": [h, w], "radius": aff.radius}
    try:
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            f.write(b"\n")
            f.write(payload)
    except OSError as exc:
        raise PersistenceError(f"cannot write affinity dump {path}: {exc}") from exc


def load_affinity(path) -> AffinityMatrix:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"affinity dump {path} has no header line")
    header = json.loads(raw[:nl].decode("utf-8"))
    for name in ("shape", "radius"):
        if name not in header:
            raise FormatError(f"affinity dump {path} missing field '{name}'")
    h, w = header["shape"]
    r = int(header["radius"])
    valid = window_validity(h, w, r)
    flat = np.frombuffer(raw[nl + 1 :], dtype="<f4")
    if flat.size != int(valid.sum()):
        raise FormatError(
            f"affinity dump {path}: {flat.size} weights, expected {int(valid.sum())}"
        )
    weights = np.zeros((h, w, (2 * r + 1) ** 2), dtype=np.float64)
    weights[valid] = flat
    return AffinityMatrix(weights, r)
