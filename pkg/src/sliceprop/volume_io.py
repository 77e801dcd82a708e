"""Volume/mask persistence, synthetic phantoms, and annotated-slice selection.

On-disk format is a purpose-built raw+header pair: ``<stem>.json`` holds the
metadata, ``<stem>.raw`` the little-endian voxel payload (z-major, then y,
then x). Intensities and soft masks are 4-byte floats, binary masks one byte
per voxel. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateSpecError,
    EmptyMaskError,
    FormatError,
    PersistenceError,
    TruncationError,
)

HEADER_FIELDS = ("shape", "dtype", "spacing", "kind", "id")
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class Volume:
    """A 3D scalar grid of D slices of HxW intensities, axis order (z, y, x)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = "volume"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got ndim={self.data.ndim}")
        d, h, w = self.data.shape
        if d < 2 or h < 8 or w < 8:
            raise ValueError(f"volume shape {self.data.shape} below minimum (2, 8, 8)")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class MaskVolume:
    """Per-voxel object probabilities paired with a Volume; soft or binary."""

    data: np.ndarray
    kind: str = "binary"  # "soft" | "binary"

    def __post_init__(self):
        if self.kind not in ("soft", "binary"):
            raise ValueError(f"mask kind must be 'soft' or 'binary', got {self.kind!r}")
        if self.kind == "binary":
            arr = np.ascontiguousarray(self.data)
            vals = np.unique(arr)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError("binary mask contains values outside {0, 1}")
            self.data = arr.astype(np.uint8)
        else:
            self.data = np.ascontiguousarray(self.data, dtype=np.float32)
            if not np.isfinite(self.data).all():
                raise ValueError("soft mask contains non-finite values")
            if self.data.min() < 0 or self.data.max() > 1:
                raise ValueError("soft mask values must lie in [0, 1]")
        if self.data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got ndim={self.data.ndim}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def binarized(self, threshold: float = 0.5) -> "MaskVolume":
        """Threshold a soft mask into a binary one (binary masks pass through)."""
        if self.kind == "binary":
            return self
        return MaskVolume((self.data >= threshold).astype(np.uint8), kind="binary")


@dataclass
class PhantomObject:
    """One synthetic structure: ellipsoid, cylinder, or blob.

    center/radii are (z, y, x) voxel coordinates; the object exists only on
    slices z in [z_start, z_end).
    """

    kind: str  # "ellipsoid" | "cylinder" | "blob"
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float = 1.0
    z_start: int = 0
    z_end: int = 1 << 30


@dataclass
class PhantomSpec:
    """Deterministic recipe for a synthetic (Volume, MaskVolume) pair."""

    shape: tuple[int, int, int]
    objects: list[PhantomObject] = field(default_factory=list)
    background_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        d = self.shape[0]
        if self.background_noise_sigma < 0:
            raise ValueError("background_noise_sigma must be nonnegative")
        for obj in self.objects:
            if obj.kind not in ("ellipsoid", "cylinder", "blob"):
                raise ValueError(f"unknown object kind {obj.kind!r}")
            if not (0 <= obj.z_start < min(obj.z_end, d + 1)):
                raise ValueError(
                    f"object z range [{obj.z_start}, {obj.z_end}) invalid for D={d}"
                )
            if any(r <= 0 for r in obj.radii):
                raise ValueError(f"object radii must be positive, got {obj.radii}")


# ---------------------------------------------------------------------------
# persistence


def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def _header_path(stem: Path) -> Path:
    # append, never replace: stems may legitimately contain dots (x.mask)
    return Path(str(stem) + ".json")


def _payload_path(stem: Path) -> Path:
    return Path(str(stem) + ".raw")


def _write_pair(stem: Path, header: dict, payload: bytes) -> None:
    try:
        _header_path(stem).write_text(json.dumps(header, sort_keys=True))
        _payload_path(stem).write_bytes(payload)
    except OSError as exc:
        raise PersistenceError(f"cannot write {stem}: {exc}") from exc


def _read_header(stem: Path) -> dict:
    hpath = _header_path(stem)
    if not hpath.exists():
        raise PersistenceError(f"missing header file {hpath}")
    try:
        header = json.loads(hpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header {hpath}: {exc}") from exc
    for name in HEADER_FIELDS:
        if name not in header:
            raise FormatError(f"header {hpath} missing field '{name}'")
    shape = header["shape"]
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(s, int) and s > 0 for s in shape)
    ):
        raise FormatError(f"header {hpath}: field 'shape' must be 3 positive ints")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"header {hpath}: field 'dtype' must be 'f32' or 'u8'")
    if header["kind"] not in ("intensity", "soft_mask", "binary_mask"):
        raise FormatError(f"header {hpath}: field 'kind' unrecognized: {header['kind']!r}")
    spacing = header["spacing"]
    if not isinstance(spacing, list) or len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise FormatError(f"header {hpath}: field 'spacing' must be 3 positive reals")
    return header


def _read_payload(stem: Path, shape, dtype: np.dtype) -> np.ndarray:
    rpath = _payload_path(stem)
    if not rpath.exists():
        raise PersistenceError(f"missing payload file {rpath}")
    payload = rpath.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise TruncationError(
            f"{rpath}: payload is {len(payload)} bytes, header shape {tuple(shape)} "
            f"requires {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def save_volume(vol: Volume, path) -> None:
    """Write a Volume as the <stem>.json/<stem>.raw pair."""
    stem = _stem(path)
    header = {
        "shape": list(vol.data.shape),
        "dtype": "f32",
        "spacing": list(vol.spacing),
        "kind": "intensity",
        "id": vol.id,
    }
    _write_pair(stem, header, vol.data.astype("<f4").tobytes())


def load_volume(path) -> Volume:
    stem = _stem(path)
    header = _read_header(stem)
    if header["kind"] != "intensity":
        raise FormatError(f"{stem}.json: field 'kind' is {header['kind']!r}, expected 'intensity'")
    data = _read_payload(stem, header["shape"], _DTYPES[header["dtype"]])
    return Volume(data.astype(np.float32), spacing=tuple(header["spacing"]), id=header["id"])


def save_mask(mask: MaskVolume, path, mask_id: str = "mask") -> None:
    """Write a MaskVolume; dtype follows kind (soft -> f32, binary -> u8)."""
    stem = _stem(path)
    if mask.kind == "binary":
        dtype, kind, payload = "u8", "binary_mask", mask.data.astype("u1").tobytes()
    else:
        dtype, kind, payload = "f32", "soft_mask", mask.data.astype("<f4").tobytes()
    header = {
        "shape": list(mask.data.shape),
        "dtype": dtype,
        "spacing": [1.0, 1.0, 1.0],
        "kind": kind,
        "id": mask_id,
    }
    _write_pair(stem, header, payload)


def load_mask(path) -> MaskVolume:
    stem = _stem(path)
    header = _read_header(stem)
    kind = header["kind"]
    if kind == "intensity":
        raise FormatError(f"{stem}.json: field 'kind' is 'intensity', expected a mask kind")
    expected_dtype = "u8" if kind == "binary_mask" else "f32"
    if header["dtype"] != expected_dtype:
        raise FormatError(
            f"{stem}.json: field 'dtype' is {header['dtype']!r}, "
            f"kind {kind!r} requires {expected_dtype!r}"
        )
    data = _read_payload(stem, header["shape"], _DTYPES[header["dtype"]])
    if kind == "binary_mask" and not np.isin(np.unique(data), (0, 1)).all():
        raise FormatError(f"{stem}.raw: binary mask payload has values outside {{0, 1}}")
    try:
        return MaskVolume(data, kind="binary" if kind == "binary_mask" else "soft")
    except ValueError as exc:
        raise FormatError(f"{stem}: {exc}") from exc


# ---------------------------------------------------------------------------
# synthetic phantoms


def _grid(shape):
    d, h, w = shape
    return np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )


def _ellipsoid_rho2(zz, yy, xx, center, radii):
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2


def _object_support(obj: PhantomObject, shape, rng: np.random.Generator) -> np.ndarray:
    zz, yy, xx = _grid(shape)
    if obj.kind == "ellipsoid":
        support = _ellipsoid_rho2(zz, yy, xx, obj.center, obj.radii) <= 1.0
    elif obj.kind == "cylinder":
        _, cy, cx = obj.center
        _, ry, rx = obj.radii
        support = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:  # blob: 2-4 jittered ellipsoids, summed occupancy thresholded at 0.5
        n_sub = int(rng.integers(2, 5))
        occupancy = np.zeros(shape, dtype=np.float64)
        for _ in range(n_sub):
            center = tuple(
                c + rng.uniform(-0.3, 0.3) * r for c, r in zip(obj.center, obj.radii)
            )
            radii = tuple(r * rng.uniform(0.6, 1.0) for r in obj.radii)
            rho2 = _ellipsoid_rho2(zz, yy, xx, center, radii)
            occupancy += np.maximum(0.0, 1.0 - rho2)
        support = occupancy >= 0.5
    z_end = min(obj.z_end, shape[0])
    support[: obj.z_start] = False
    support[z_end:] = False
    return support


def synth_volume(spec: PhantomSpec, vol_id: str | None = None) -> tuple[Volume, MaskVolume]:
    """Render a phantom: background 0 + per-object intensity + Gaussian noise.

    The mask is the binary union of all object supports. Deterministic for a
    fixed spec (including seed).
    """
    rng = np.random.default_rng(spec.seed)
    intensity = np.zeros(spec.shape, dtype=np.float64)
    mask = np.zeros(spec.shape, dtype=bool)
    for i, obj in enumerate(spec.objects):
        support = _object_support(obj, spec.shape, rng)
        if not support.any():
            raise DegenerateSpecError(f"object {i} ({obj.kind}) has empty voxel support")
        intensity += obj.intensity * support
        mask |= support
    if spec.background_noise_sigma > 0:
        intensity += rng.normal(0.0, spec.background_noise_sigma, spec.shape)
    vol = Volume(
        intensity.astype(np.float32),
        id=vol_id if vol_id is not None else f"phantom-{spec.seed}",
    )
    return vol, MaskVolume(mask.astype(np.uint8), kind="binary")


# ---------------------------------------------------------------------------
# annotated-slice selection


def largest_gt_slice_index(mask: MaskVolume) -> int:
    """Index of the slice with the largest foreground area (ties -> smallest z)."""
    if mask.kind != "binary":
        raise ValueError("largest_gt_slice_index requires a binary mask")
    areas = mask.data.reshape(mask.data.shape[0], -1).sum(axis=1)
    if areas.sum() == 0:
        raise EmptyMaskError("mask has no foreground voxels")
    return int(np.argmax(areas))


def pick_annotated_slice(mask: MaskVolume, seed: int) -> int:
    """Pick uniformly among the nonempty slices within +-3 of the largest one."""
    c = largest_gt_slice_index(mask)
    d = mask.data.shape[0]
    areas = mask.data.reshape(d, -1).sum(axis=1)
    lo, hi = max(0, c - 3), min(d - 1, c + 3)
    candidates = [z for z in range(lo, hi + 1) if areas[z] > 0]
    if not candidates:
        raise DegenerateSpecError("no nonempty slice within +-3 of the largest slice")
    rng = np.random.default_rng(seed)
    return int(candidates[rng.integers(len(candidates))])
