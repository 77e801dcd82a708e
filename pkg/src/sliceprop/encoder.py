"""Shared-weight convolutional feature extractor with analytic gradients.

A stack of same-padded k x k convolutions (ReLU between layers, linear final
layer) maps an H x W x C channel stack to an H x W x F feature map. Forward
and backward passes are plain numpy; gradients are exact and are checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, PersistenceError, ShapeError, TruncationError
from .geig import GradientEnhancedSlice

_EPS_NORM = 1e-12


@dataclass
class EncoderConfig:
    in_channels: int = 9
    hidden_channels: tuple[int, ...] = (16, 16)
    feature_dim: int = 16
    kernel_size: int = 3
    nonlinearity: str = "relu"
    l2_normalize: bool = False
    dtype: str = "f64"  # "f64" | "f32"
    seed: int = 0

    def __post_init__(self):
        self.hidden_channels = tuple(int(c) for c in self.hidden_channels)
        if self.in_channels < 1 or any(c < 1 for c in self.hidden_channels):
            raise ValueError("channel counts must be positive")
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.nonlinearity != "relu":
            raise ValueError(f"unsupported nonlinearity {self.nonlinearity!r}")
        if self.dtype not in ("f64", "f32"):
            raise ValueError(f"dtype must be 'f64' or 'f32', got {self.dtype!r}")

    @property
    def layer_channels(self) -> list[tuple[int, int]]:
        """(c_in, c_out) per conv layer, input to output."""
        dims = (self.in_channels, *self.hidden_channels, self.feature_dim)
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class EncoderParams:
    """Per-layer weights (k, k, c_in, c_out) and biases (c_out,)."""

    config: EncoderConfig
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def n_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def all_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights) and all(
            np.isfinite(b).all() for b in self.biases
        )


@dataclass
class EncoderGrads:
    """Gradient tensors shaped like EncoderParams."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def add_(self, other: "EncoderGrads") -> None:
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b

    def scale_(self, factor: float) -> None:
        for w in self.weights:
            w *= factor
        for b in self.biases:
            b *= factor


@dataclass
class FeatureMap:
    """H x W x F per-pixel feature vectors."""

    data: np.ndarray

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


def zero_grads(params: EncoderParams) -> EncoderGrads:
    return EncoderGrads(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def init_encoder(cfg: EncoderConfig) -> EncoderParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    k = cfg.kernel_size
    weights, biases = [], []
    for c_in, c_out in cfg.layer_channels:
        bound = np.sqrt(3.0 / (k * k * c_in))
        weights.append(rng.uniform(-bound, bound, size=(k, k, c_in, c_out)))
        biases.append(np.zeros(c_out, dtype=np.float64))
    return EncoderParams(cfg, weights, biases)


# ---------------------------------------------------------------------------
# forward / backward


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded (zero) convolution; x is (H, W, Cin), w is (k, k, Cin, Cout)."""
    k = w.shape[0]
    p = k // 2
    padded = np.pad(x, ((p, p), (p, p), (0, 0)))
    win = sliding_window_view(padded, (k, k), axis=(0, 1))  # (H, W, Cin, k, k)
    return np.einsum("hwcyx,yxco->hwo", win, w, optimize=True) + b


def _conv_backward(x, w, upstream):
    """Gradients of _conv_forward: returns (dw, db, dx)."""
    k = w.shape[0]
    p = k // 2
    h, wd = x.shape[:2]
    padded = np.pad(x, ((p, p), (p, p), (0, 0)))
    win = sliding_window_view(padded, (k, k), axis=(0, 1))
    dw = np.einsum("hwcyx,hwo->yxco", win, upstream, optimize=True)
    db = upstream.sum(axis=(0, 1))
    dpad = np.zeros_like(padded)
    for ky in range(k):
        for kx in range(k):
            dpad[ky : ky + h, kx : kx + wd] += upstream @ w[ky, kx].T
    return dw, db, dpad[p : p + h, p : p + wd]


def _forward_cached(params: EncoderParams, x: np.ndarray):
    """Run the full stack, keeping per-layer inputs and pre-activations."""
    dtype = np.float64 if params.config.dtype == "f64" else np.float32
    x = np.asarray(x, dtype=dtype)
    n_layers = len(params.weights)
    inputs, preacts = [], []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(x)
        a = _conv_forward(x, w.astype(dtype), b.astype(dtype))
        preacts.append(a)
        x = np.maximum(a, 0.0) if i < n_layers - 1 else a
    norms = None
    if params.config.l2_normalize:
        norms = np.sqrt((x * x).sum(axis=-1, keepdims=True)) + _EPS_NORM
        x = x / norms
    return x, (inputs, preacts, norms)


def _backward_from_cache(params: EncoderParams, cache, upstream: np.ndarray):
    inputs, preacts, norms = cache
    dtype = np.float64 if params.config.dtype == "f64" else np.float32
    g = np.asarray(upstream, dtype=dtype)
    if params.config.l2_normalize:
        y = preacts[-1] / norms
        g = (g - y * (y * g).sum(axis=-1, keepdims=True)) / norms
    n_layers = len(params.weights)
    w_grads = [None] * n_layers
    b_grads = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * (preacts[i] > 0)
        dw, db, g = _conv_backward(inputs[i], params.weights[i].astype(dtype), g)
        w_grads[i] = dw.astype(np.float64)
        b_grads[i] = db.astype(np.float64)
    return EncoderGrads(w_grads, b_grads), g


def _check_channels(params: EncoderParams, x: np.ndarray) -> None:
    if x.ndim != 3:
        raise ShapeError(f"encoder input must be H x W x C, got ndim={x.ndim}")
    if x.shape[2] != params.config.in_channels:
        raise ShapeError(
            f"encoder expects {params.config.in_channels} input channels, "
            f"got {x.shape[2]}"
        )


def encode(params: EncoderParams, ges: GradientEnhancedSlice) -> FeatureMap:
    """Map a channel stack to an H x W x F feature map (spatial shape preserved)."""
    _check_channels(params, ges.data)
    out, _ = _forward_cached(params, ges.data)
    return FeatureMap(out)


def encode_backward(
    params: EncoderParams, ges: GradientEnhancedSlice, upstream: np.ndarray
) -> tuple[EncoderGrads, np.ndarray]:
    """Exact gradients of encode: returns (parameter grads, input gradient)."""
    _check_channels(params, ges.data)
    out, cache = _forward_cached(params, ges.data)
    if upstream.shape != out.shape:
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} != output shape {out.shape}"
        )
    return _backward_from_cache(params, cache, upstream)


# ---------------------------------------------------------------------------
# checkpointing


def _payload_bytes(params: EncoderParams) -> bytes:
    chunks = []
    for w, b in zip(params.weights, params.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(params: EncoderParams, path) -> None:
    """Write header JSON line + raw f64 payload (w0, b0, w1, b1, ...)."""
    payload = _payload_bytes(params)
    header = {
        "config": asdict(params.config),
        "format": "f64",
        "sha": hashlib.sha256(payload).hexdigest(),
    }
    try:
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            f.write(b"\n")
            f.write(payload)
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> EncoderParams:
    path = Path(path)
    if not path.exists():
        raise PersistenceError(f"missing checkpoint {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"checkpoint {path} has no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint {path} header unparseable: {exc}") from exc
    for name in ("config", "format", "sha"):
        if name not in header:
            raise FormatError(f"checkpoint {path} header missing field '{name}'")
    if header["format"] != "f64":
        raise FormatError(f"checkpoint {path}: unsupported format {header['format']!r}")
    payload = raw[nl + 1 :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["sha"]:
        raise FormatError(f"checkpoint {path}: payload digest mismatch")
    cfg = EncoderConfig(**header["config"])
    k = cfg.kernel_size
    expected = sum(k * k * ci * co + co for ci, co in cfg.layer_channels)
    if len(payload) % 8 != 0:
        raise TruncationError(
            f"checkpoint {path}: payload length {len(payload)} not a multiple of 8"
        )
    buf = np.frombuffer(payload, dtype="<f8")
    if buf.size != expected:
        raise TruncationError(
            f"checkpoint {path}: payload has {buf.size} f64 values, "
            f"config requires {expected}"
        )
    weights, biases, offset = [], [], 0
    for c_in, c_out in cfg.layer_channels:
        n_w = k * k * c_in * c_out
        weights.append(buf[offset : offset + n_w].reshape(k, k, c_in, c_out).copy())
        offset += n_w
        biases.append(buf[offset : offset + c_out].copy())
        offset += c_out
    return EncoderParams(cfg, weights, biases)
