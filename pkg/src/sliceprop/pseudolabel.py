"""Pseudo-label generation via bootstrap propagation and pluggable refinement.

Three refiners ship: identity, morphological (largest connected component +
3x3x3 binary closing), and a tiny learned 3D convolutional denoiser that maps
(intensity, PL) -> PL. The learned one stands in, at desk scale, for a full 3D
segmentation model; it shares the same optimizer stack as the encoder
training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .correspondence import WindowSpec
from .encoder import EncoderParams
from .errors import EmptyMaskError, RefinementError, ShapeError
from .geig import FeatureSpec, minmax_normalize
from .metrics import per_slice_dice
from .propagate import PropagationConfig, propagate_volume
from .training import adamw_step
from .volume_io import MaskVolume, Volume


def generate_pls(
    bootstrap_params: EncoderParams,
    volume: Volume,
    annotated_index: int,
    annotated_mask: np.ndarray,
    win: WindowSpec,
    features: FeatureSpec | None = None,
) -> MaskVolume:
    """Propagate the annotated slice through the volume with the bootstrap
    (single-path) model; returns a soft pseudo-label volume.

    The slice at annotated_index equals the given mask exactly.
    """
    mask = np.asarray(annotated_mask)
    if mask.sum() == 0:
        raise EmptyMaskError("annotated mask is empty")
    if volume.data.shape[0] == 1:
        return MaskVolume(mask[None].astype(np.float32), kind="soft")
    cfg = PropagationConfig(
        mode="single_path",
        window=win,
        features=features if features is not None else FeatureSpec(kind="edge_profile"),
    )
    soft, _ = propagate_volume(bootstrap_params, volume, annotated_index, mask, cfg)
    return soft


def impose_annotated_slice(
    pls: MaskVolume, annotated_index: int, annotated_mask: np.ndarray
) -> MaskVolume:
    """Overwrite one slice with the human-provided mask (kept inviolate)."""
    data = pls.data.copy()
    data[annotated_index] = np.asarray(annotated_mask, dtype=data.dtype)
    return MaskVolume(data, kind=pls.kind)


def refine_pls(refiner, volume: Volume, pls: MaskVolume) -> MaskVolume:
    """Delegate to a refiner, checking its shape contract."""
    if pls.data.shape != volume.data.shape:
        raise ShapeError(
            f"pseudo-label shape {pls.data.shape} != volume shape {volume.data.shape}"
        )
    try:
        refined = refiner.refine(volume, pls)
    except Exception as exc:
        raise RefinementError(f"refiner {refiner.name!r} failed: {exc}") from exc
    if refined.data.shape != volume.data.shape:
        raise RefinementError(
            f"refiner {refiner.name!r} changed the shape: {refined.data.shape}"
        )
    return refined


def pl_quality_report(
    pls: MaskVolume, gt: MaskVolume, annotated_index: int
) -> list[tuple[int, float, int]]:
    """(z, dice, |z - annotated_index|) per slice; PLs binarized at 0.5."""
    scores = per_slice_dice(pls, gt)
    return [(z, s, abs(z - annotated_index)) for z, s in enumerate(scores)]


# ---------------------------------------------------------------------------
# refiners


class Refiner:
    """Maps (volume, pseudo-labels) to refined pseudo-labels of equal shape."""

    name = "refiner"

    def refine(self, volume: Volume, pls: MaskVolume) -> MaskVolume:
        raise NotImplementedError


class IdentityRefiner(Refiner):
    name = "identity"

    def refine(self, volume: Volume, pls: MaskVolume) -> MaskVolume:
        return MaskVolume(pls.data.copy(), kind=pls.kind)


class MorphologicalRefiner(Refiner):
    """Keep the largest 3D connected component, then close with a 3x3x3 element."""

    name = "morph"

    def __init__(self, threshold: float = 0.5):
        self.threshold = threshold
        self._structure = np.ones((3, 3, 3), dtype=bool)

    def refine(self, volume: Volume, pls: MaskVolume) -> MaskVolume:
        binary = pls.binarized(self.threshold).data.astype(bool)
        if binary.any():
            labels, n = ndimage.label(binary, structure=self._structure)
            counts = np.bincount(labels.ravel())
            counts[0] = 0
            keep = labels == int(np.argmax(counts))
            # pad before closing so structures touching the volume faces are
            # not eroded by the zero border scipy assumes
            padded = np.pad(keep, 1, mode="edge")
            closed = ndimage.binary_closing(padded, structure=self._structure)
            binary = closed[1:-1, 1:-1, 1:-1]
        return MaskVolume(binary.astype(np.uint8), kind="binary")


@dataclass
class LearnedRefinerConfig:
    hidden_channels: tuple[int, ...] = (8, 8)
    kernel_size: int = 3
    epochs: int = 40
    learning_rate: float = 0.003
    weight_decay: float = 0.0
    seed: int = 0


class LearnedRefiner(Refiner):
    """Tiny 3-layer 3D conv denoiser: (normalized intensity, soft PL) -> PL.

    Trained across all training volumes, the PL noise (inconsistent between
    volumes) averages out while the intensity-to-mask signal is retained.
    Sigmoid output, MSE loss, same AdamW-style update as encoder training.
    """

    name = "learned"

    def __init__(self, cfg: LearnedRefinerConfig | None = None):
        self.cfg = cfg if cfg is not None else LearnedRefinerConfig()
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        self._init_params()

    def _init_params(self):
        rng = np.random.default_rng(self.cfg.seed)
        k = self.cfg.kernel_size
        dims = (2, *self.cfg.hidden_channels, 1)
        self.weights, self.biases = [], []
        for c_in, c_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(3.0 / (k**3 * c_in))
            self.weights.append(rng.uniform(-bound, bound, size=(k, k, k, c_in, c_out)))
            self.biases.append(np.zeros(c_out))

    # -- minimal 3D conv stack ------------------------------------------------

    def _stack_input(self, volume: Volume, pls: MaskVolume) -> np.ndarray:
        return np.stack(
            [minmax_normalize(volume.data), pls.data.astype(np.float64)], axis=-1
        )

    @staticmethod
    def _conv3d(x, w, b):
        k = w.shape[0]
        p = k // 2
        d, h, wd = x.shape[:3]
        padded = np.pad(x, ((p, p), (p, p), (p, p), (0, 0)))
        out = np.zeros((d, h, wd, w.shape[-1]))
        for kz in range(k):
            for ky in range(k):
                for kx in range(k):
                    out += padded[kz : kz + d, ky : ky + h, kx : kx + wd] @ w[kz, ky, kx]
        return out + b

    @staticmethod
    def _conv3d_backward(x, w, upstream):
        k = w.shape[0]
        p = k // 2
        d, h, wd = x.shape[:3]
        padded = np.pad(x, ((p, p), (p, p), (p, p), (0, 0)))
        dw = np.empty_like(w)
        dpad = np.zeros_like(padded)
        for kz in range(k):
            for ky in range(k):
                for kx in range(k):
                    win = padded[kz : kz + d, ky : ky + h, kx : kx + wd]
                    dw[kz, ky, kx] = np.einsum("dhwc,dhwo->co", win, upstream)
                    dpad[kz : kz + d, ky : ky + h, kx : kx + wd] += upstream @ w[kz, ky, kx].T
        db = upstream.sum(axis=(0, 1, 2))
        return dw, db, dpad[p : p + d, p : p + h, p : p + wd]

    def _forward(self, x):
        inputs, preacts = [], []
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(x)
            a = self._conv3d(x, w, b)
            preacts.append(a)
            x = np.maximum(a, 0.0) if i < n - 1 else a
        prob = 1.0 / (1.0 + np.exp(-x[..., 0]))
        return prob, (inputs, preacts)

    def fit(self, volumes: list[Volume], pls: list[MaskVolume]) -> list[float]:
        """Train on (volume, PL) -> PL reproduction; returns per-epoch losses."""
        if len(volumes) != len(pls):
            raise ShapeError(f"{len(volumes)} volumes but {len(pls)} PL volumes")
        m1 = [np.zeros_like(w) for w in self.weights] + [
            np.zeros_like(b) for b in self.biases
        ]
        m2 = [np.zeros_like(t) for t in m1]
        step = 0
        epoch_losses = []
        for _ in range(self.cfg.epochs):
            losses = []
            for vol, pl in zip(volumes, pls):
                x = self._stack_input(vol, pl)
                target = pl.data.astype(np.float64)
                prob, (inputs, preacts) = self._forward(x)
                resid = prob - target
                losses.append(float((resid**2).mean()))
                # d/da of mse over sigmoid output
                g = (2.0 * resid / resid.size) * prob * (1.0 - prob)
                g = g[..., None]
                w_grads = [None] * len(self.weights)
                b_grads = [None] * len(self.biases)
                for i in range(len(self.weights) - 1, -1, -1):
                    if i < len(self.weights) - 1:
                        g = g * (preacts[i] > 0)
                    dw, db, g = self._conv3d_backward(inputs[i], self.weights[i], g)
                    w_grads[i] = dw
                    b_grads[i] = db
                step += 1
                adamw_step(
                    self.weights + self.biases,
                    m1,
                    m2,
                    w_grads + b_grads,
                    step,
                    self.cfg.learning_rate,
                    self.cfg.weight_decay,
                )
            epoch_losses.append(float(np.mean(losses)))
        return epoch_losses

    def refine(self, volume: Volume, pls: MaskVolume) -> MaskVolume:
        prob, _ = self._forward(self._stack_input(volume, pls))
        return MaskVolume(np.clip(prob, 0.0, 1.0).astype(np.float32), kind="soft")


def make_refiner(name: str, **kwargs) -> Refiner:
    if name == "identity":
        return IdentityRefiner()
    if name == "morph":
        return MorphologicalRefiner()
    if name == "learned":
        return LearnedRefiner(LearnedRefinerConfig(**kwargs))
    raise ValueError(f"unknown refiner {name!r}")
