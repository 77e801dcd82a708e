"""Self-supervised slice-reconstruction training.

One step: transform a pair of adjacent slices (plus their pseudo-labels in
dual-path mode), encode, fuse, compute the windowed affinity, reconstruct the
target slice's normalized intensity from the source slice, and backpropagate
through the whole chain. Updates use decoupled weight decay (AdamW-style).
All arithmetic is float64 by default and fully deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .correspondence import (
    AffinityMatrix,
    WindowSpec,
    affinity_backward,
    apply_affinity,
    compute_affinity,
    FeatureMap,
)
from .encoder import (
    EncoderConfig,
    EncoderGrads,
    EncoderParams,
    _backward_from_cache,
    _forward_cached,
    init_encoder,
    save_checkpoint,
    zero_grads,
)
from .errors import ConfigError, NumericError, ShapeError
from .geig import FeatureSpec, minmax_normalize
from .volume_io import MaskVolume, Volume

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    mode: str = "single_path"  # "single_path" | "dual_path"
    learning_rate: float = 1e-4
    weight_decay: float = 0.005
    epochs: int = 4
    batch_size: int = 8
    window: WindowSpec = field(default_factory=WindowSpec)
    loss: str = "l1"  # "l1" | "mse"
    seed: int = 0
    features: FeatureSpec = field(default_factory=FeatureSpec)
    encoder: EncoderConfig | None = None

    def __post_init__(self):
        if self.mode not in ("single_path", "dual_path"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.loss not in ("l1", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def resolved_encoder(self) -> EncoderConfig:
        """Encoder config with in_channels tied to the feature transform."""
        if self.encoder is None:
            return EncoderConfig(in_channels=self.features.channels, seed=self.seed)
        if self.encoder.in_channels != self.features.channels:
            raise ConfigError(
                f"encoder in_channels {self.encoder.in_channels} != feature "
                f"channels {self.features.channels}"
            )
        return self.encoder


@dataclass
class TrainState:
    params: EncoderParams
    m: EncoderGrads
    v: EncoderGrads
    step: int = 0
    epoch_losses: list[float] = field(default_factory=list)


@dataclass
class TrainItem:
    """One adjacent-slice pair; pl_* are None in single-path mode."""

    pair_id: str
    slice_j: np.ndarray
    slice_j1: np.ndarray
    pl_j: np.ndarray | None = None
    pl_j1: np.ndarray | None = None


def sample_pairs(volumes, pls=None, seed=0, mode: str = "single_path"):
    """Yield every adjacent pair of every volume once, in shuffled order.

    In dual-path mode each item carries the matching pseudo-label slices.
    Deterministic for a fixed seed.
    """
    if mode == "dual_path":
        if pls is None:
            raise ConfigError("dual_path sampling requires pseudo-labels")
        if len(pls) != len(volumes):
            raise ConfigError(
                f"{len(volumes)} volumes but {len(pls)} pseudo-label volumes"
            )
        for vol, pl in zip(volumes, pls):
            if pl.data.shape != vol.data.shape:
                raise ShapeError(
                    f"pseudo-label shape {pl.data.shape} != volume {vol.data.shape}"
                )
    index = []
    for i, vol in enumerate(volumes):
        d = vol.data.shape[0]
        if d < 2:
            warnings.warn(f"volume {vol.id!r} has D={d} < 2 slices; skipped")
            continue
        index.extend((i, j) for j in range(d - 1))
    rng = np.random.default_rng(seed)
    for i, j in (index[k] for k in rng.permutation(len(index))):
        vol = volumes[i]
        item = TrainItem(
            pair_id=f"{vol.id}:z{j}",
            slice_j=np.asarray(vol.data[j], dtype=np.float64),
            slice_j1=np.asarray(vol.data[j + 1], dtype=np.float64),
        )
        if mode == "dual_path":
            pl = pls[i]
            item.pl_j = np.asarray(pl.data[j], dtype=np.float64)
            item.pl_j1 = np.asarray(pl.data[j + 1], dtype=np.float64)
        yield item


def reconstruction_loss(
    aff: AffinityMatrix, source: np.ndarray, target: np.ndarray, kind: str = "l1"
):
    """Pixel-mean reconstruction error plus its gradient w.r.t. the affinity.

    source/target are 2D intensity arrays (normalize them first if desired).
    Returns (loss, d_weights) with d_weights shaped like aff.weights.
    """
    if source.shape != target.shape:
        raise ShapeError(f"source shape {source.shape} != target {target.shape}")
    recon = apply_affinity(aff, source)
    resid = recon - target
    n = resid.size
    if kind == "l1":
        loss = float(np.abs(resid).mean())
        d_recon = np.sign(resid) / n
    elif kind == "mse":
        loss = float((resid**2).mean())
        d_recon = 2.0 * resid / n
    else:
        raise ConfigError(f"unknown loss {kind!r}")
    h, w = source.shape
    r = aff.radius
    padded = np.pad(source.astype(np.float64), r)
    d_weights = np.empty_like(aff.weights)
    for slot, (dy, dx) in enumerate(WindowSpec(r).offsets()):
        d_weights[:, :, slot] = d_recon * padded[r + dy : r + dy + h, r + dx : r + dx + w]
    return loss, d_weights


def _pair_forward(params: EncoderParams, cfg: TrainConfig, item: TrainItem):
    """Forward pass for one pair; returns the loss plus everything backward needs."""
    tf = cfg.features
    ges = [tf.apply(item.slice_j), tf.apply(item.slice_j1)]
    outs, caches = [], []
    for g in ges:
        o, c = _forward_cached(params, g.data)
        outs.append(o)
        caches.append(c)
    if cfg.mode == "dual_path":
        if item.pl_j is None or item.pl_j1 is None:
            raise ConfigError("dual_path training item is missing pseudo-labels")
        ges += [tf.apply(item.pl_j), tf.apply(item.pl_j1)]
        for g in ges[2:]:
            o, c = _forward_cached(params, g.data)
            outs.append(o)
            caches.append(c)
        key = np.concatenate([outs[0], outs[2]], axis=-1)
        query = np.concatenate([outs[1], outs[3]], axis=-1)
    else:
        key, query = outs[0], outs[1]
    aff = compute_affinity(FeatureMap(key), FeatureMap(query), cfg.window)
    source = minmax_normalize(item.slice_j)
    target = minmax_normalize(item.slice_j1)
    loss, d_weights = reconstruction_loss(aff, source, target, cfg.loss)
    return loss, (key, query, aff, d_weights, caches)


def _pair_backward(params: EncoderParams, cfg: TrainConfig, fwd):
    """Gradients of the pair loss w.r.t. the encoder parameters.

    Also returns the input gradients per encoded stack (slice_j, slice_j1[,
    pl_j, pl_j1]) for diagnostics.
    """
    key, query, aff, d_weights, caches = fwd
    d_key, d_query = affinity_backward(FeatureMap(key), FeatureMap(query), aff, d_weights)
    total = zero_grads(params)
    input_grads = []
    if cfg.mode == "dual_path":
        f = params.config.feature_dim
        upstreams = [d_key[..., :f], d_query[..., :f], d_key[..., f:], d_query[..., f:]]
    else:
        upstreams = [d_key, d_query]
    for cache, upstream in zip(caches, upstreams):
        grads, d_in = _backward_from_cache(params, cache, upstream)
        total.add_(grads)
        input_grads.append(d_in)
    return total, input_grads


def adamw_step(tensors, moments1, moments2, grads, t, lr, wd) -> None:
    """One decoupled-weight-decay adaptive-moment update over parallel tensor
    lists, in place. t is the 1-based step count."""
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for p, m, v, g in zip(tensors, moments1, moments2, grads):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS) + wd * p)


def adamw_update(state: TrainState, grads: EncoderGrads, cfg: TrainConfig) -> None:
    state.step += 1
    adamw_step(
        state.params.weights + state.params.biases,
        state.m.weights + state.m.biases,
        state.v.weights + state.v.biases,
        grads.weights + grads.biases,
        state.step,
        cfg.learning_rate,
        cfg.weight_decay,
    )


def train(
    cfg: TrainConfig,
    volumes: list[Volume],
    pls: list[MaskVolume] | None = None,
    out_dir=None,
) -> EncoderParams:
    """Run the full schedule and return the final parameters.

    When out_dir is given, also writes encoder.ckpt, train_log.csv
    (step, epoch, pair_id, loss) and a run manifest with the resolved config.
    """
    state = train_to_state(cfg, volumes, pls, out_dir=out_dir)
    return state.params


def train_to_state(
    cfg: TrainConfig,
    volumes: list[Volume],
    pls: list[MaskVolume] | None = None,
    out_dir=None,
) -> TrainState:
    if not volumes:
        raise ConfigError("no training volumes")
    if cfg.mode == "dual_path" and pls is None:
        raise ConfigError("dual_path training requires pseudo-labels")
    params = init_encoder(cfg.resolved_encoder())
    state = TrainState(params, zero_grads(params), zero_grads(params))
    log_rows = []
    for epoch in range(cfg.epochs):
        epoch_seed = np.random.SeedSequence([cfg.seed, epoch])
        items = list(sample_pairs(volumes, pls, seed=epoch_seed, mode=cfg.mode))
        if not items:
            raise ConfigError("training data has no adjacent slice pairs")
        epoch_losses = []
        for start in range(0, len(items), cfg.batch_size):
            batch = items[start : start + cfg.batch_size]
            total = zero_grads(params)
            for item in batch:
                loss, fwd = _pair_forward(params, cfg, item)
                if not np.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at step {state.step}, pair {item.pair_id}"
                    )
                grads, _ = _pair_backward(params, cfg, fwd)
                total.add_(grads)
                epoch_losses.append(loss)
                log_rows.append((state.step, epoch, item.pair_id, loss))
            total.scale_(1.0 / len(batch))
            adamw_update(state, total, cfg)
        state.epoch_losses.append(float(np.mean(epoch_losses)))
        if not state.params.all_finite():
            raise NumericError(f"non-finite parameters after epoch {epoch}")
    if out_dir is not None:
        _write_run_artifacts(cfg, state, log_rows, Path(out_dir))
    return state


def _write_run_artifacts(cfg, state, log_rows, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.params, out_dir / "encoder.ckpt")
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "epoch", "pair_id", "loss"])
        for row in log_rows:
            writer.writerow([row[0], row[1], row[2], f"{row[3]:.12g}"])
    manifest = {
        "config": config_dict(cfg),
        "steps": state.step,
        "epoch_losses": state.epoch_losses,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    if cfg.encoder is None:
        d["encoder"] = asdict(cfg.resolved_encoder())
    return d


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradientCheckReport:
    max_rel_error: float
    threshold: float
    loss: float
    n_checked: int
    pl_input_grad_norm: float | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def _rel_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-4) -> float:
    return float(np.max(np.abs(a - n) / np.maximum(floor, np.abs(a) + np.abs(n))))


def gradient_check(
    cfg: TrainConfig,
    item: TrainItem,
    step: float = 1e-5,
    threshold: float = 1e-4,
) -> GradientCheckReport:
    """End-to-end analytic vs central finite-difference parameter gradients.

    Perturbs every parameter entry, so keep the instance small (<= 8x8,
    window radius <= 2, a narrow encoder).
    """
    params = init_encoder(cfg.resolved_encoder())
    loss, fwd = _pair_forward(params, cfg, item)
    analytic, input_grads = _pair_backward(params, cfg, fwd)

    def loss_only() -> float:
        value, _ = _pair_forward(params, cfg, item)
        return value

    max_err = 0.0
    n_checked = 0
    for p, g in zip(
        params.weights + params.biases, analytic.weights + analytic.biases
    ):
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + step
            plus = loss_only()
            p[idx] = orig - step
            minus = loss_only()
            p[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            max_err = max(max_err, _rel_error(np.float64(g[idx]), np.float64(numeric)))
            n_checked += 1
            it.iternext()
    pl_norm = None
    if cfg.mode == "dual_path":
        pl_norm = float(
            np.sqrt(sum(float((g**2).sum()) for g in input_grads[2:]))
        )
    return GradientCheckReport(max_err, threshold, loss, n_checked, pl_norm)
