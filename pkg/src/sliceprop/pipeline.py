"""Staged, on-disk pipeline over one flat configuration.

Every stage reads its inputs from the shared output directory, validates the
manifest of the stage it depends on, and writes its own manifest recording the
resolved config plus content digests. Reruns with an unchanged config
reproduce byte-identical artifacts; manifests hold only relative paths.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .correspondence import WindowSpec
from .encoder import EncoderConfig, load_checkpoint
from .errors import ConfigError, StageDependencyError
from .geig import DEFAULT_DIRECTIONS, FeatureSpec, GeigConfig
from .metrics import (
    RunResult,
    VolumeResult,
    dice_decay_curve,
    mean_decay_curve,
    per_slice_dice,
    write_decay_csv,
    write_results_csv,
    write_summary_csv,
    summarize_runs,
)
from .pseudolabel import (
    generate_pls,
    impose_annotated_slice,
    make_refiner,
    refine_pls,
)
from .propagate import PropagationConfig, propagate_with_trace
from .training import TrainConfig, config_dict, train_to_state
from .volume_io import (
    MaskVolume,
    PhantomObject,
    PhantomSpec,
    Volume,
    load_mask,
    load_volume,
    pick_annotated_slice,
    save_mask,
    save_volume,
    synth_volume,
)

FAMILIES = ("cylinder", "object_appears", "object_ends")

CONFIG_DEFAULTS = {
    "seed": 0,
    "out": "",
    "run_id": "",
    "families": list(FAMILIES),
    "n_train": 3,
    "n_test": 2,
    "shape": [16, 32, 32],
    "noise_sigma": 0.0,
    "geig_directions": list(DEFAULT_DIRECTIONS),
    "geig_scales": [3, 5],
    "include_intensity": True,
    "edge_window": 3,
    "encoder_hidden": [16, 16],
    "feature_dim": 16,
    "kernel_size": 3,
    "l2_normalize": False,
    "precision": "f64",
    "window_radius": 7,
    "learning_rate": 1e-4,
    "weight_decay": 0.005,
    "epochs": 4,
    "batch_size": 8,
    "loss": "l1",
    "oeg_tag": "oeg",
    "oeg_features": "geig",
    "oeg_pls": "refined",
    "refiner": "morph",
    "refiner_epochs": 40,
    "refiner_lr": 0.003,
    "propagation_mode": "dual_reuse_prev",
    "per_step_binarize": False,
    "output_threshold": 0.5,
    "annotation": "protocol",  # "protocol" (largest GT slice +-3) | "middle"
    "plot": True,
}

_LIST_KEYS = {"families", "shape", "geig_directions", "geig_scales", "encoder_hidden"}


# ---------------------------------------------------------------------------
# configuration


def parse_config_text(text: str) -> dict:
    """Accept a JSON object or flat key=value lines (# comments allowed)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        raw = json.loads(stripped)
        if not isinstance(raw, dict):
            raise ConfigError("JSON config must be an object")
        return raw
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def _coerce(key: str, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        if key in _LIST_KEYS:
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                value = [v.strip() for v in value.split(",") if v.strip()]
        elif isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false"):
                raise ConfigError(f"config key {key!r}: expected true/false, got {value!r}")
            return low == "true"
        else:
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r}: expected bool, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value != int(value):
            raise ConfigError(f"config key {key!r}: expected int, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {key!r}: expected a list, got {value!r}")
        elem = CONFIG_DEFAULTS[key][0] if CONFIG_DEFAULTS[key] else None
        if isinstance(elem, int):
            return [int(v) for v in value]
        return [str(v) for v in value]
    return str(value)


def resolve_config(raw: dict, overrides: dict | None = None) -> dict:
    """Apply defaults, coerce types, and reject unknown keys."""
    merged = dict(raw)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(merged) - set(CONFIG_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, default in CONFIG_DEFAULTS.items():
        cfg[key] = _coerce(key, merged[key], default) if key in merged else default
    for fam in cfg["families"]:
        if fam not in FAMILIES:
            raise ConfigError(f"unknown phantom family {fam!r}")
    if len(cfg["shape"]) != 3:
        raise ConfigError("shape must be [D, H, W]")
    if cfg["oeg_features"] not in ("geig", "edge_profile"):
        raise ConfigError(f"oeg_features must be geig|edge_profile, got {cfg['oeg_features']!r}")
    if cfg["oeg_pls"] not in ("refined", "raw"):
        raise ConfigError(f"oeg_pls must be refined|raw, got {cfg['oeg_pls']!r}")
    if cfg["annotation"] not in ("protocol", "middle"):
        raise ConfigError(f"annotation must be protocol|middle, got {cfg['annotation']!r}")
    return cfg


def load_config(path, overrides: dict | None = None) -> dict:
    return resolve_config(parse_config_text(Path(path).read_text()), overrides)


def _geig_config(cfg: dict) -> GeigConfig:
    return GeigConfig(
        directions=tuple(cfg["geig_directions"]),
        scales=tuple(cfg["geig_scales"]),
        include_intensity=cfg["include_intensity"],
    )


def feature_spec(cfg: dict, kind: str) -> FeatureSpec:
    return FeatureSpec(kind=kind, geig=_geig_config(cfg), edge_window=cfg["edge_window"])


def _feature_spec_from_dict(d: dict) -> FeatureSpec:
    geig = d["geig"]
    return FeatureSpec(
        kind=d["kind"],
        geig=GeigConfig(
            directions=tuple(geig["directions"]),
            scales=tuple(geig["scales"]),
            include_intensity=geig["include_intensity"],
        ),
        edge_window=d["edge_window"],
    )


def train_config(cfg: dict, mode: str, features_kind: str) -> TrainConfig:
    features = feature_spec(cfg, features_kind)
    encoder = EncoderConfig(
        in_channels=features.channels,
        hidden_channels=tuple(cfg["encoder_hidden"]),
        feature_dim=cfg["feature_dim"],
        kernel_size=cfg["kernel_size"],
        l2_normalize=cfg["l2_normalize"],
        dtype=cfg["precision"],
        seed=cfg["seed"],
    )
    return TrainConfig(
        mode=mode,
        learning_rate=cfg["learning_rate"],
        weight_decay=cfg["weight_decay"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        window=WindowSpec(cfg["window_radius"]),
        loss=cfg["loss"],
        seed=cfg["seed"],
        features=features,
        encoder=encoder,
    )


# ---------------------------------------------------------------------------
# manifests


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(stage_dir: Path, payload: dict) -> Path:
    path = stage_dir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def _require_manifest(out: Path, stage_subdir: str) -> dict:
    path = out / stage_subdir / "manifest.json"
    if not path.exists():
        raise StageDependencyError(f"missing upstream stage artifact: {path}")
    return json.loads(path.read_text())


def _manifest_digest(out: Path, stage_subdir: str) -> str:
    return file_digest(out / stage_subdir / "manifest.json")


def _outputs_digest_map(stage_dir: Path, paths: list[Path]) -> dict:
    return {
        str(p.relative_to(stage_dir)): file_digest(p) for p in sorted(paths)
    }


def _out_root(cfg: dict) -> Path:
    if not cfg["out"]:
        raise ConfigError("an output directory is required (--out or out=...)")
    return Path(cfg["out"])


# ---------------------------------------------------------------------------
# phantom families


def _subseed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _ring_stack(rng, z_center, cy, cx, r_outer, intensity, z_start=0, z_end=1 << 30):
    """A cylinder with two concentric interior intensity rings (z-constant)."""
    return [
        PhantomObject(
            "cylinder", (z_center, cy, cx), (1.0, r_outer, r_outer), intensity,
            z_start=z_start, z_end=z_end,
        ),
        PhantomObject(
            "cylinder", (z_center, cy, cx), (1.0, 0.6 * r_outer, 0.6 * r_outer),
            rng.uniform(0.3, 0.6), z_start=z_start, z_end=z_end,
        ),
        PhantomObject(
            "cylinder", (z_center, cy, cx), (1.0, 0.3 * r_outer, 0.3 * r_outer),
            rng.uniform(0.4, 0.8), z_start=z_start, z_end=z_end,
        ),
    ]


def _texture_dots(rng, d, h, w, count=16):
    """Small z-constant intensity bumps; they give every pixel neighborhood a
    distinctive appearance so correspondence is not ambiguous along contours."""
    dots = []
    for _ in range(count):
        py = rng.uniform(3, h - 3)
        px = rng.uniform(3, w - 3)
        rr = rng.uniform(1.2, 2.6)
        dots.append(
            PhantomObject(
                "cylinder", (d / 2, py, px), (1.0, rr, rr),
                float(rng.choice((-0.4, -0.25, 0.25, 0.4))),
            )
        )
    return dots


def build_phantom_specs(
    family: str, shape, noise_sigma: float, seed: int
) -> tuple[PhantomSpec, PhantomSpec]:
    """Geometry for one phantom: (full spec, SOI-only spec).

    All structures are extruded along z (cylinders), so within an object's z
    range adjacent slices are identical up to the configured 3D noise. The
    SOI is always the first object and object supports consume no randomness,
    so rendering both specs with the same seed yields bit-identical SOI
    supports.
    """
    rng = np.random.default_rng(seed)
    d, h, w = shape
    cy = h / 2 + rng.uniform(-0.04, 0.04) * h

    if family == "cylinder":
        r0 = 0.27 * min(h, w) * rng.uniform(0.9, 1.1)
        cx = w / 2 + rng.uniform(-0.04, 0.04) * w
        objects = _ring_stack(rng, d / 2, cy, cx, r0, 1.0) + _texture_dots(rng, d, h, w)
    elif family in ("object_appears", "object_ends"):
        # SOI on the left; a distractor with the same intensity profile right
        # next to it (gap of a pixel or two, like adjacent organs), so pure
        # appearance matching bleeds across while the mask estimate does not.
        # The distractor appears (or the SOI ends) mid-volume.
        r0 = 0.18 * min(h, w) * rng.uniform(0.9, 1.1)
        r_dis = r0 * rng.uniform(0.85, 1.0)
        gap = rng.uniform(1.5, 3.0)
        cx = w / 2 - (gap / 2 + r0)
        dis_cx = w / 2 + gap / 2 + r_dis
        if family == "object_ends":
            z_end = int(round(d * rng.uniform(0.55, 0.7)))
            objects = _ring_stack(rng, d / 2, cy, cx, r0, 1.0, z_end=z_end)
            objects += _ring_stack(rng, d / 2, cy, dis_cx, r_dis, 1.0)
        else:  # object_appears
            z_start = int(round(d * rng.uniform(0.35, 0.5)))
            objects = _ring_stack(rng, d / 2, cy, cx, r0, 1.0)
            objects += _ring_stack(rng, d / 2, cy, dis_cx, r_dis, 1.0, z_start=z_start)
        objects += _texture_dots(rng, d, h, w, count=12)
    else:
        raise ConfigError(f"unknown phantom family {family!r}")

    render_seed = _subseed(seed, 1)
    full = PhantomSpec(tuple(shape), objects, noise_sigma, render_seed)
    soi_only = PhantomSpec(tuple(shape), [objects[0]], 0.0, render_seed)
    return full, soi_only


def render_phantom(family, shape, noise_sigma, seed, vol_id):
    full_spec, soi_spec = build_phantom_specs(family, shape, noise_sigma, seed)
    vol, _ = synth_volume(full_spec, vol_id)
    _, soi_mask = synth_volume(soi_spec, vol_id + "-soi")
    return vol, soi_mask


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: dict) -> Path:
    """Generate train/test phantoms per family, with annotated-slice choices."""
    out = _out_root(cfg)
    data_dir = out / "data"
    entries = {"train": [], "test": []}
    outputs = []
    for split_idx, (split, count) in enumerate(
        (("train", cfg["n_train"]), ("test", cfg["n_test"]))
    ):
        split_dir = data_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for fam_idx, family in enumerate(cfg["families"]):
            for i in range(count):
                vol_id = f"{family}-{split}-{i:02d}"
                geom_seed = _subseed(cfg["seed"], split_idx, fam_idx, i)
                vol, soi = render_phantom(
                    family, cfg["shape"], cfg["noise_sigma"], geom_seed, vol_id
                )
                if cfg["annotation"] == "middle":
                    ai = vol.data.shape[0] // 2
                else:
                    ai = pick_annotated_slice(soi, _subseed(geom_seed, 2))
                stem = split_dir / vol_id
                mask_stem = split_dir / f"{vol_id}.mask"
                save_volume(vol, stem)
                save_mask(soi, mask_stem, mask_id=f"{vol_id}-gt")
                outputs += [
                    Path(str(stem) + ".json"),
                    Path(str(stem) + ".raw"),
                    Path(str(mask_stem) + ".json"),
                    Path(str(mask_stem) + ".raw"),
                ]
                entries[split].append(
                    {
                        "id": vol_id,
                        "family": family,
                        "stem": f"{split}/{vol_id}",
                        "mask_stem": f"{split}/{vol_id}.mask",
                        "annotated_index": int(ai),
                    }
                )
    manifest = {
        "stage": "synth",
        "config": cfg,
        "volumes": entries,
        "outputs": _outputs_digest_map(data_dir, outputs),
    }
    return _write_manifest(data_dir, manifest)


def _load_entry(out: Path, entry: dict) -> tuple[Volume, MaskVolume, int]:
    vol = load_volume(out / "data" / entry["stem"])
    gt = load_mask(out / "data" / entry["mask_stem"])
    return vol, gt, entry["annotated_index"]


def _load_split(out: Path, data_manifest: dict, split: str):
    return [
        _load_entry(out, entry) for entry in data_manifest["volumes"][split]
    ]


def stage_train_bootstrap(cfg: dict) -> Path:
    """Single-path training with first-order edge-profile inputs."""
    out = _out_root(cfg)
    data_manifest = _require_manifest(out, "data")
    volumes = [v for v, _, _ in _load_split(out, data_manifest, "train")]
    tc = train_config(cfg, "single_path", "edge_profile")
    stage_dir = out / "bootstrap"
    train_to_state(tc, volumes, out_dir=stage_dir)
    manifest = {
        "stage": "train_bootstrap",
        "config": cfg,
        "train_config": config_dict(tc),
        "features": asdict(tc.features),
        "upstream": {"data": _manifest_digest(out, "data")},
        "outputs": _outputs_digest_map(
            stage_dir,
            [
                stage_dir / "encoder.ckpt",
                stage_dir / "train_log.csv",
                stage_dir / "run_manifest.json",
            ],
        ),
    }
    return _write_manifest(stage_dir, manifest)


def stage_gen_pls(cfg: dict) -> Path:
    """Bootstrap propagation of each training volume's annotated slice."""
    out = _out_root(cfg)
    data_manifest = _require_manifest(out, "data")
    boot_manifest = _require_manifest(out, "bootstrap")
    params = load_checkpoint(out / "bootstrap" / "encoder.ckpt")
    features = _feature_spec_from_dict(boot_manifest["features"])
    win = WindowSpec(cfg["window_radius"])
    stage_dir = out / "pls"
    stage_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for entry in data_manifest["volumes"]["train"]:
        vol, gt, ai = _load_entry(out, entry)
        pls = generate_pls(params, vol, ai, gt.data[ai], win, features=features)
        stem = stage_dir / f"{entry['id']}.pl"
        save_mask(pls, stem, mask_id=f"{entry['id']}-pl")
        outputs += [Path(str(stem) + ".json"), Path(str(stem) + ".raw")]
    manifest = {
        "stage": "gen_pls",
        "config": cfg,
        "upstream": {
            "data": _manifest_digest(out, "data"),
            "bootstrap": _manifest_digest(out, "bootstrap"),
        },
        "outputs": _outputs_digest_map(stage_dir, outputs),
    }
    return _write_manifest(stage_dir, manifest)


def stage_refine_pls(cfg: dict) -> Path:
    """Apply the configured refiner, then re-impose the annotated slices."""
    out = _out_root(cfg)
    data_manifest = _require_manifest(out, "data")
    _require_manifest(out, "pls")
    entries = data_manifest["volumes"]["train"]
    loaded = [
        (entry, *_load_entry(out, entry), load_mask(out / "pls" / f"{entry['id']}.pl"))
        for entry in entries
    ]
    if cfg["refiner"] == "learned":
        refiner = make_refiner(
            "learned",
            epochs=cfg["refiner_epochs"],
            learning_rate=cfg["refiner_lr"],
            seed=cfg["seed"],
        )
        refiner.fit([v for _, v, _, _, _ in loaded], [p for _, _, _, _, p in loaded])
    else:
        refiner = make_refiner(cfg["refiner"])
    stage_dir = out / "pls_refined"
    stage_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for entry, vol, gt, ai, pls in loaded:
        refined = refine_pls(refiner, vol, pls)
        refined = impose_annotated_slice(refined, ai, gt.data[ai])
        stem = stage_dir / f"{entry['id']}.pl"
        save_mask(refined, stem, mask_id=f"{entry['id']}-pl-refined")
        outputs += [Path(str(stem) + ".json"), Path(str(stem) + ".raw")]
    manifest = {
        "stage": "refine_pls",
        "config": cfg,
        "refiner": refiner.name,
        "upstream": {
            "data": _manifest_digest(out, "data"),
            "pls": _manifest_digest(out, "pls"),
        },
        "outputs": _outputs_digest_map(stage_dir, outputs),
    }
    return _write_manifest(stage_dir, manifest)


def stage_train_oeg(cfg: dict) -> Path:
    """Dual-path training on slices plus (refined) pseudo-labels."""
    out = _out_root(cfg)
    data_manifest = _require_manifest(out, "data")
    pls_subdir = "pls_refined" if cfg["oeg_pls"] == "refined" else "pls"
    _require_manifest(out, pls_subdir)
    volumes, pls = [], []
    for entry in data_manifest["volumes"]["train"]:
        vol, _, _ = _load_entry(out, entry)
        volumes.append(vol)
        pls.append(load_mask(out / pls_subdir / f"{entry['id']}.pl"))
    tc = train_config(cfg, "dual_path", cfg["oeg_features"])
    stage_dir = out / cfg["oeg_tag"]
    train_to_state(tc, volumes, pls, out_dir=stage_dir)
    manifest = {
        "stage": "train_oeg",
        "config": cfg,
        "train_config": config_dict(tc),
        "features": asdict(tc.features),
        "upstream": {
            "data": _manifest_digest(out, "data"),
            "pls": _manifest_digest(out, pls_subdir),
        },
        "outputs": _outputs_digest_map(
            stage_dir,
            [
                stage_dir / "encoder.ckpt",
                stage_dir / "train_log.csv",
                stage_dir / "run_manifest.json",
            ],
        ),
    }
    return _write_manifest(stage_dir, manifest)


def stage_propagate(cfg: dict) -> Path:
    """Test-stage propagation of each test volume's annotated slice."""
    out = _out_root(cfg)
    data_manifest = _require_manifest(out, "data")
    mode = cfg["propagation_mode"]
    if mode == "single_path":
        ckpt_stage = "bootstrap"
    else:
        ckpt_stage = cfg["oeg_tag"]
    ckpt_manifest = _require_manifest(out, ckpt_stage)
    params = load_checkpoint(out / ckpt_stage / "encoder.ckpt")
    features = _feature_spec_from_dict(ckpt_manifest["features"])
    pcfg = PropagationConfig(
        mode=mode,
        window=WindowSpec(cfg["window_radius"]),
        per_step_binarize=cfg["per_step_binarize"],
        output_threshold=cfg["output_threshold"],
        features=features,
    )
    run_id = cfg["run_id"] or mode
    stage_dir = out / "propagate" / run_id
    stage_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    trace_path = stage_dir / "trace.csv"
    with open(trace_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["volume", "direction", "z", "soft_mass", "max_value", "dice"])
        for entry in data_manifest["volumes"]["test"]:
            vol, gt, ai = _load_entry(out, entry)
            soft, binary, rows = propagate_with_trace(
                params, vol, ai, gt.data[ai], pcfg, gt=gt
            )
            soft_stem = stage_dir / f"{entry['id']}.soft"
            bin_stem = stage_dir / f"{entry['id']}.bin"
            save_mask(soft, soft_stem, mask_id=f"{entry['id']}-soft")
            save_mask(binary, bin_stem, mask_id=f"{entry['id']}-bin")
            outputs += [
                Path(str(soft_stem) + ".json"),
                Path(str(soft_stem) + ".raw"),
                Path(str(bin_stem) + ".json"),
                Path(str(bin_stem) + ".raw"),
            ]
            for row in rows:
                writer.writerow(
                    [
                        entry["id"],
                        row.direction,
                        row.z,
                        f"{row.soft_mass:.9g}",
                        f"{row.max_value:.9g}",
                        "" if row.dice is None else f"{row.dice:.9g}",
                    ]
                )
    outputs.append(trace_path)
    manifest = {
        "stage": "propagate",
        "run_id": run_id,
        "config": cfg,
        "mode": mode,
        "checkpoint_stage": ckpt_stage,
        "upstream": {
            "data": _manifest_digest(out, "data"),
            ckpt_stage: _manifest_digest(out, ckpt_stage),
        },
        "outputs": _outputs_digest_map(stage_dir, outputs),
    }
    return _write_manifest(stage_dir, manifest)


def _discover_runs(out: Path) -> list[dict]:
    runs = []
    prop_root = out / "propagate"
    if prop_root.exists():
        for manifest_path in sorted(prop_root.glob("*/manifest.json")):
            runs.append(json.loads(manifest_path.read_text()))
    if not runs:
        raise StageDependencyError(f"no propagation runs found under {prop_root}")
    return runs


def stage_eval(cfg: dict) -> Path:
    """Score every propagation run against ground truth; emit the CSV suite."""
    out = _out_root(cfg)
    data_manifest = _require_manifest(out, "data")
    data_digest = _manifest_digest(out, "data")
    runs = _discover_runs(out)
    results = []
    decay_curves = {}
    for run in runs:
        if run["upstream"]["data"] != data_digest:
            raise StageDependencyError(
                f"run {run['run_id']!r} was propagated against different data "
                "(manifest digest mismatch); refusing mixed-provenance eval"
            )
        run_dir = out / "propagate" / run["run_id"]
        vols = []
        curves = []
        for entry in data_manifest["volumes"]["test"]:
            _, gt, ai = _load_entry(out, entry)
            pred = load_mask(run_dir / f"{entry['id']}.bin")
            vols.append(
                VolumeResult(
                    entry["id"], entry["family"], ai, per_slice_dice(pred, gt)
                )
            )
            curves.append(dice_decay_curve(pred, gt, ai))
        results.append(
            RunResult(run["run_id"], file_digest(run_dir / "manifest.json"), vols)
        )
        decay_curves[run["run_id"]] = mean_decay_curve(curves)
    stage_dir = out / "eval"
    stage_dir.mkdir(parents=True, exist_ok=True)
    write_results_csv(results, stage_dir / "results.csv")
    write_summary_csv(summarize_runs(results), stage_dir / "summary.csv")
    write_decay_csv(decay_curves, stage_dir / "decay.csv")
    manifest = {
        "stage": "eval",
        "config": cfg,
        "runs": sorted(r["run_id"] for r in runs),
        "upstream": {"data": data_digest},
        "outputs": _outputs_digest_map(
            stage_dir,
            [stage_dir / "results.csv", stage_dir / "summary.csv", stage_dir / "decay.csv"],
        ),
    }
    return _write_manifest(stage_dir, manifest)


def stage_plot(cfg: dict) -> Path:
    """Render the decay curves to a raster file next to the CSV."""
    out = _out_root(cfg)
    _require_manifest(out, "eval")
    decay_path = out / "eval" / "decay.csv"
    if not decay_path.exists():
        raise StageDependencyError(f"missing decay curve CSV: {decay_path}")
    curves: dict[str, list[tuple[int, float]]] = {}
    with open(decay_path, newline="") as f:
        for row in csv.DictReader(f):
            curves.setdefault(row["run"], []).append(
                (int(row["distance"]), float(row["mean_dice"]))
            )
    png_path = out / "eval" / "decay.png"
    if cfg["plot"]:
        from .plots import save_decay_plot

        save_decay_plot(curves, png_path, title="Dice vs distance from annotated slice")
    return png_path if cfg["plot"] else decay_path


STAGES = {
    "synth": stage_synth,
    "train-bootstrap": stage_train_bootstrap,
    "gen-pls": stage_gen_pls,
    "refine-pls": stage_refine_pls,
    "train-oeg": stage_train_oeg,
    "propagate": stage_propagate,
    "eval": stage_eval,
    "plot": stage_plot,
}
