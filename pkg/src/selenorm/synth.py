"""Synthetic reference scenes and paired radiometrically degraded inputs.

All randomness comes from numpy's counter-based Philox generator keyed by
64-bit seeds; per-scene seeds are derived from a root seed with SHA-256 so a
dataset is a pure function of its specs.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, special

from .errors import ParameterError, SelenormError
from .raster import ImageGrid
from .rasterfile import read_container, read_raster, write_container

MANIFEST_SCHEMA = "selenorm.pair/1"
SATURATION_WARN = 0.25
JITTER_SPACING = 64


def derive_seed(root: int, *keys) -> int:
    text = ":".join(str(k) for k in (root, *keys))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: tuple[int, int] = (1024, 1024)
    crater_density: float = 20.0
    noise_octaves: int = 5
    contrast: float = 0.75

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if self.size[0] < 128 or self.size[1] < 128:
            raise ParameterError(f"scenes must be at least 128x128, got {self.size}")
        if self.crater_density < 0:
            raise ParameterError("crater_density must be >= 0")
        if self.noise_octaves < 1:
            raise ParameterError("noise_octaves must be >= 1")
        if not 0 < self.contrast <= 1:
            raise ParameterError(f"contrast must lie in (0, 1], got {self.contrast}")


@dataclass(frozen=True)
class DegradationSpec:
    seed: int = 0
    tile_layout: tuple[int, int] = (1, 4)
    gain_range: tuple[float, float] = (0.85, 1.15)
    bias_range: tuple[float, float] = (-0.08, 0.08)
    gradient_amplitude: float = 0.1
    gamma_range: tuple[float, float] = (0.9, 1.1)
    seam_jitter: int = 3
    noise_sigma: float = 0.01

    def __post_init__(self):
        for name in ("tile_layout", "gain_range", "bias_range", "gamma_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        rows, cols = self.tile_layout
        if rows < 1 or cols < 1:
            raise ParameterError(f"tile_layout must be >= (1, 1), got {self.tile_layout}")
        for name in ("gain_range", "bias_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ParameterError(f"{name} has lo > hi")
        if self.gain_range[0] <= 0 or self.gamma_range[0] <= 0:
            raise ParameterError("gain and gamma must be positive")
        if self.seam_jitter < 0 or self.noise_sigma < 0:
            raise ParameterError("seam_jitter and noise_sigma must be >= 0")


@dataclass(frozen=True)
class Boundary:
    """Tile boundary polyline.

    For ``vertical`` boundaries ``positions[r]`` is the first column of the
    right-hand tile in row ``r``; for ``horizontal`` ones ``positions[c]`` is
    the first row of the lower tile in column ``c``.
    """

    orientation: str
    positions: np.ndarray


# -- reference scenes -------------------------------------------------------


def _value_noise(rng, shape, cell: float) -> np.ndarray:
    h, w = shape
    lattice = rng.standard_normal((int(np.ceil(h / cell)) + 4, int(np.ceil(w / cell)) + 4))
    rows = np.arange(h) / cell + 1.5
    cols = np.arange(w) / cell + 1.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(lattice, [rr, cc], order=3, mode="nearest")


def _add_crater(height, rng, radius):
    h, w = height.shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    depth = 0.4 * radius
    reach = int(3 * radius) + 2
    r0, r1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
    c0, c1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
    if r0 >= r1 or c0 >= c1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1]
    d = np.hypot(yy - cy, xx - cx) / radius
    bowl = np.where(d < 1, d**2 - 1, 0.0)
    rim = 0.35 * np.exp(-(((d - 1) / 0.25) ** 2))
    ejecta = np.where(d >= 1, 0.35 * np.exp(-(d - 1) * 3) * 0.3, 0.0)
    height[r0:r1, c0:c1] += depth * (bowl + rim + ejecta)


def generate_reference_scene(spec: SceneSpec) -> ImageGrid:
    """Crater-pocked shaded-relief field with a near-uniform histogram.

    A multi-octave height field (plus craters) is hillshaded from a fixed sun
    direction, mixed with a weak low-frequency albedo term, then pushed through
    the normal CDF so the intensity histogram is spread over
    ``0.5 +/- contrast / 2``.
    """
    rng = philox(spec.seed)
    shape = spec.size
    height = np.zeros(shape)
    for octave in range(spec.noise_octaves):
        cell = 64.0 / 2**octave
        height += cell * 0.08 * _value_noise(rng, shape, cell)
    n_craters = rng.poisson(spec.crater_density * shape[0] * shape[1] / 1e6)
    for _ in range(n_craters):
        u = rng.uniform()
        radius = 4.0 * (1 - u * (1 - (4.0 / 48.0) ** 1.5)) ** (-1 / 1.5)
        _add_crater(height, rng, radius)
    gy, gx = np.gradient(height)
    sun = np.deg2rad(135.0)
    shade = gx * np.cos(sun) + gy * np.sin(sun)
    shade = (shade - shade.mean()) / (shade.std() + 1e-12)
    albedo = _value_noise(rng, shape, 256.0)
    field_ = shade + 0.15 * albedo
    z = (field_ - field_.mean()) / (field_.std() + 1e-12)
    u = special.ndtr(z)
    values = 0.5 + spec.contrast * (u - 0.5)
    return ImageGrid(np.clip(values, 0.0, 1.0), value_depth=16, name=f"scene-{spec.seed}")


# -- degradation --------------------------------------------------------------


@dataclass
class DegradationRecord:
    tile_layout: tuple[int, int]
    gains: list
    biases: list
    gammas: list
    gradient_amplitude: float
    gradient_angle: float
    noise_sigma: float
    noise_seed: int
    vertical: list = field(default_factory=list)
    horizontal: list = field(default_factory=list)
    saturation_fraction: float = 0.0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRecord":
        d = dict(d)
        d["tile_layout"] = tuple(d["tile_layout"])
        return cls(**d)

    def boundaries(self, shape) -> list[Boundary]:
        h, w = shape
        out = []
        for b in self.vertical:
            out.append(Boundary("vertical", _polyline(b, h)))
        for b in self.horizontal:
            out.append(Boundary("horizontal", _polyline(b, w)))
        return out


def _polyline(b: dict, n: int) -> np.ndarray:
    knots = np.asarray(b["knots"], dtype=np.float64)
    offsets = np.asarray(b["offsets"], dtype=np.float64)
    pos = b["base"] + np.interp(np.arange(n), knots, offsets)
    return np.rint(pos).astype(np.int64)


def _sample_boundaries(rng, count, extent, along, jitter):
    bounds = []
    knots = list(range(0, along, JITTER_SPACING))
    if knots[-1] != along - 1:
        knots.append(along - 1)
    for k in range(1, count):
        base = int(round(k * extent / count))
        offsets = rng.integers(-jitter, jitter + 1, size=len(knots)).tolist() if jitter else [0] * len(knots)
        bounds.append({"base": base, "knots": knots, "offsets": offsets})
    return bounds


def sample_degradation(shape, spec: DegradationSpec) -> DegradationRecord:
    rng = philox(spec.seed)
    rows, cols = spec.tile_layout
    h, w = shape
    if rows > h or cols > w:
        raise ParameterError(f"tile_layout {spec.tile_layout} does not fit a {h}x{w} raster")
    gains = rng.uniform(*spec.gain_range, size=(rows, cols))
    biases = rng.uniform(*spec.bias_range, size=(rows, cols))
    gammas = rng.uniform(*spec.gamma_range, size=(rows, cols))
    angle = float(rng.uniform(0, 2 * np.pi))
    vertical = _sample_boundaries(rng, cols, w, h, spec.seam_jitter)
    horizontal = _sample_boundaries(rng, rows, h, w, spec.seam_jitter)
    return DegradationRecord(
        tile_layout=(rows, cols),
        gains=gains.tolist(),
        biases=biases.tolist(),
        gammas=gammas.tolist(),
        gradient_amplitude=float(spec.gradient_amplitude),
        gradient_angle=angle,
        noise_sigma=float(spec.noise_sigma),
        noise_seed=derive_seed(spec.seed, "noise"),
        vertical=vertical,
        horizontal=horizontal,
    )


def tile_labels(record: DegradationRecord, shape) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    ti = np.zeros(shape, dtype=np.int64)
    tj = np.zeros(shape, dtype=np.int64)
    cols = np.arange(w)[None, :]
    rows = np.arange(h)[:, None]
    for b in record.boundaries(shape):
        if b.orientation == "vertical":
            tj += cols >= b.positions[:, None]
        else:
            ti += rows >= b.positions[None, :]
    return ti, tj


def gradient_field(shape, amplitude: float, angle: float) -> np.ndarray:
    """Planar ramp with peak-to-peak ``amplitude`` along direction ``angle``."""
    h, w = shape
    r = np.linspace(-0.5, 0.5, h)[:, None] if h > 1 else np.zeros((1, 1))
    c = np.linspace(-0.5, 0.5, w)[None, :] if w > 1 else np.zeros((1, 1))
    p = c * np.cos(angle) + r * np.sin(angle)
    span = abs(np.cos(angle)) * (w > 1) + abs(np.sin(angle)) * (h > 1)
    if span == 0 or amplitude == 0:
        return np.zeros(shape)
    return amplitude * p / span


def render_degradation(reference: np.ndarray, record: DegradationRecord) -> np.ndarray:
    """Deterministically apply a sampled degradation.

    Order: gamma, gain, bias, global gradient, noise, clamp to [0, 1].
    """
    ref = np.asarray(reference, dtype=np.float64)
    ti, tj = tile_labels(record, ref.shape)
    gains = np.asarray(record.gains)[ti, tj]
    biases = np.asarray(record.biases)[ti, tj]
    gammas = np.asarray(record.gammas)[ti, tj]
    out = gains * np.power(ref, gammas) + biases
    if record.gradient_amplitude:
        out = out + gradient_field(ref.shape, record.gradient_amplitude, record.gradient_angle)
    if record.noise_sigma:
        out = out + record.noise_sigma * philox(record.noise_seed).standard_normal(ref.shape)
    return np.clip(out, 0.0, 1.0), float(np.mean((out <= 0.0) | (out >= 1.0)))


def apply_degradation(reference: ImageGrid, spec: DegradationSpec):
    record = sample_degradation(reference.shape, spec)
    values, saturated = render_degradation(reference.values, record)
    record.saturation_fraction = saturated
    if saturated > SATURATION_WARN:
        msg = f"{saturated:.1%} of pixels saturated by the degradation"
        record.warnings.append(msg)
        warnings.warn(msg, stacklevel=2)
    return reference.replace(values=values, name=f"{reference.name}-degraded"), record


def replay_degradation(reference: ImageGrid | np.ndarray, record: DegradationRecord) -> np.ndarray:
    ref = reference.values if isinstance(reference, ImageGrid) else reference
    return render_degradation(ref, record)[0]


# -- paired datasets ----------------------------------------------------------


@dataclass
class PairManifest:
    pair_id: str
    reference_path: str
    degraded_path: str
    degradation_record: DegradationRecord
    split: str
    scene_seed: int | None = None
    root: Path | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema": MANIFEST_SCHEMA,
                "pair_id": self.pair_id,
                "reference_path": self.reference_path,
                "degraded_path": self.degraded_path,
                "split": self.split,
                "scene_seed": self.scene_seed,
                "degradation_record": self.degradation_record.to_dict(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str, root=None) -> "PairManifest":
        d = json.loads(line)
        if d.get("schema") != MANIFEST_SCHEMA:
            raise SelenormError(f"unsupported manifest schema {d.get('schema')!r}")
        return cls(
            pair_id=d["pair_id"],
            reference_path=d["reference_path"],
            degraded_path=d["degraded_path"],
            degradation_record=DegradationRecord.from_dict(d["degradation_record"]),
            split=d["split"],
            scene_seed=d.get("scene_seed"),
            root=Path(root) if root is not None else None,
        )

    def _resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load_reference(self) -> ImageGrid:
        return read_raster(self._resolve(self.reference_path), name=f"{self.pair_id}-reference")

    def load_degraded(self) -> ImageGrid:
        return read_raster(self._resolve(self.degraded_path), name=f"{self.pair_id}-degraded")

    def boundaries(self, shape) -> list[Boundary]:
        return self.degradation_record.boundaries(shape)


def split_counts(n: int, fractions) -> list[int]:
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must sum to 1, got {sum(fractions)}")
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


SPLITS = ("train", "val", "test")


def make_paired_dataset(
    n_scenes: int,
    scene_spec: SceneSpec,
    degradation_spec: DegradationSpec,
    split_fractions=(0.8, 0.1, 0.1),
    out_dir=None,
    reference_rasters=None,
) -> list[PairManifest]:
    """Generate ``n_scenes`` reference/degraded pairs and write them to ``out_dir``.

    Pairs are written as float containers next to ``manifest.jsonl``; manifest
    paths are relative to ``out_dir`` so two runs with the same seeds produce
    byte-identical manifests. ``reference_rasters`` replaces generated scenes
    with user rasters (one per scene, in order).
    """
    counts = split_counts(n_scenes, split_fractions)
    splits = [name for name, c in zip(SPLITS, counts) for _ in range(c)]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise SelenormError(f"cannot create dataset directory {out}: {exc}") from exc
    if reference_rasters is not None and len(reference_rasters) != n_scenes:
        raise ParameterError("need exactly one reference raster per scene")

    entries = []
    for i in range(n_scenes):
        pair_id = f"pair-{i:04d}"
        scene_seed = derive_seed(scene_spec.seed, "scene", i)
        if reference_rasters is None:
            scene = generate_reference_scene(_with(scene_spec, seed=scene_seed))
        else:
            scene, scene_seed = read_raster(reference_rasters[i]), None
        # round through float32 first so the stored pair replays bit-exactly
        ref32 = scene.values.astype(np.float32)
        deg_spec = _with(degradation_spec, seed=derive_seed(degradation_spec.seed, "degrade", i))
        degraded, record = apply_degradation(scene.replace(values=ref32.astype(np.float64)), deg_spec)
        entry = PairManifest(
            pair_id, f"{pair_id}_reference.slr", f"{pair_id}_degraded.slr", record, splits[i], scene_seed, out
        )
        if out is not None:
            try:
                write_container(out / entry.reference_path, ref32)
                write_container(out / entry.degraded_path, degraded.values.astype(np.float32))
            except OSError as exc:
                raise SelenormError(f"cannot write pair {pair_id}: {exc}") from exc
        entries.append(entry)
    if out is not None:
        write_manifest(out / "manifest.jsonl", entries)
    return entries


def _with(spec, **changes):
    d = asdict(spec)
    d.update(changes)
    return type(spec)(**d)


def write_manifest(path, entries) -> None:
    Path(path).write_text("".join(e.to_json() + "\n" for e in entries))


def read_manifest(path) -> list[PairManifest]:
    path = Path(path)
    return [PairManifest.from_json(line, root=path.parent) for line in path.read_text().splitlines() if line.strip()]


def verify_replay(entry: PairManifest) -> bool:
    ref = read_container(entry._resolve(entry.reference_path)).astype(np.float64)
    deg = read_container(entry._resolve(entry.degraded_path))
    return np.array_equal(replay_degradation(ref, entry.degradation_record).astype(np.float32), deg)
