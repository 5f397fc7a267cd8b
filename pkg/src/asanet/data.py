"""Procedural bimodal scenes, SAR stretching, cloud simulation and dataset I/O.

Each scene is a label map of rectangles and ellipses.  The optical raster
renders each class with a mean colour plus Gaussian texture; the backscatter
raster multiplies a per-class level by gamma speckle and is stretched to
8 bits.  Clouds only touch the optical raster.

The default four-class palette is built so the two modalities complement
each other: forest and farmland share a backscatter level but differ in
colour, while water and ``other`` share a mean colour but differ in
backscatter.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"SCNE"
_HEADER = struct.Struct("<4sHHB")
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def sample_seed(base_seed: int, index: int) -> int:
    """64-bit seed of sample ``index``: splitmix64(splitmix64(base) ^ index)."""
    return splitmix64(splitmix64(base_seed & _MASK64) ^ (index & _MASK64))


@dataclass
class SceneSpec:
    size: int = 64
    num_classes: int = 4
    class_names: Tuple[str, ...] = ("other", "water", "forest", "farmland")
    # expected share of pixels per class
    area_priors: Tuple[float, ...] = (0.35, 0.15, 0.28, 0.22)
    # base layer of grid_min..grid_max rectangles per axis, then ellipses/boxes on top
    grid_range: Tuple[int, int] = (2, 4)
    shapes_range: Tuple[int, int] = (3, 8)
    palette: Tuple[Tuple[float, float, float], ...] = (
        (118.0, 112.0, 100.0),
        (118.0, 112.0, 100.0),
        (52.0, 98.0, 48.0),
        (178.0, 164.0, 92.0),
    )
    texture: Tuple[float, ...] = (22.0, 5.0, 14.0, 14.0)
    backscatter: Tuple[float, ...] = (0.60, 0.07, 0.30, 0.30)
    looks: int = 4
    cloud_coverage: float = 0.4
    turbulence: float = 1.5
    opacity: float = 1.0
    sar_lo_pct: float = 2.0
    sar_hi_pct: float = 98.0
    seed: int = 0

    def __post_init__(self):
        for name in ("class_names", "area_priors", "grid_range", "shapes_range", "texture", "backscatter"):
            setattr(self, name, tuple(getattr(self, name)))
        self.palette = tuple(tuple(float(v) for v in row) for row in self.palette)
        self.validate()

    def validate(self) -> None:
        k = self.num_classes
        if k < 2:
            raise ConfigError("a scene needs at least two classes")
        for name in ("class_names", "area_priors", "palette", "texture", "backscatter"):
            if len(getattr(self, name)) != k:
                raise ConfigError(f"{name} must have exactly {k} rows, got {len(getattr(self, name))}")
        if abs(sum(self.area_priors) - 1.0) > 1e-9 or min(self.area_priors) < 0:
            raise ConfigError(f"area priors must be a distribution, got {self.area_priors}")
        if not 0.0 <= self.cloud_coverage <= 1.0 or not 0.0 <= self.opacity <= 1.0:
            raise ConfigError("cloud coverage and opacity must lie in [0, 1]")
        if self.size < 8 or self.looks < 1:
            raise ConfigError("size >= 8 and looks >= 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k == "palette" else list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def with_classes(cls, num_classes: int, **kw) -> "SceneSpec":
        """Default spec for ``num_classes``; classes past four get generated palettes."""
        if num_classes == 4:
            return cls(**kw)
        base = cls()
        rng = np.random.default_rng(1234)
        names, priors, pal, tex, bs = [], [], [], [], []
        for i in range(num_classes):
            if i < 4:
                names.append(base.class_names[i]); pal.append(base.palette[i])
                tex.append(base.texture[i]); bs.append(base.backscatter[i])
            else:
                names.append(f"class{i}"); pal.append(tuple(rng.uniform(40, 210, 3)))
                tex.append(14.0); bs.append(float(rng.uniform(0.1, 0.7)))
            priors.append(1.0 / num_classes)
        return cls(num_classes=num_classes, class_names=tuple(names), area_priors=tuple(priors),
                   palette=tuple(pal), texture=tuple(tex), backscatter=tuple(bs), **kw)


@dataclass
class SceneSample:
    rgb: np.ndarray  # 3 x H x W uint8
    sar: np.ndarray  # 1 x H x W uint8
    label: np.ndarray  # H x W uint8


# ---------------------------------------------------------------------------
# rasters


def sar_stretch(raw: np.ndarray, lo_pct: float = 2.0, hi_pct: float = 98.0) -> np.ndarray:
    """Clip at the two percentiles and map [lo, hi] affinely onto [0, 255]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise DataError("cannot stretch an empty raster")
    lo, hi = np.percentile(raw, [lo_pct, hi_pct])
    if not hi > lo:
        return np.zeros(raw.shape, dtype=np.uint8)
    scaled = (np.clip(raw, lo, hi) - lo) * (255.0 / (hi - lo))
    return np.floor(scaled + 0.5).clip(0, 255).astype(np.uint8)


def _value_noise(rng: np.random.Generator, size: int, turbulence: float, octaves: int = 4, base_cells: int = 3) -> np.ndarray:
    """Sum of bilinearly interpolated random lattices; octave o has weight turbulence**-o."""
    field_ = np.zeros((size, size))
    for o in range(octaves):
        cells = base_cells * 2**o
        lattice = rng.random((cells + 1, cells + 1))
        coords = np.linspace(0.0, cells, size, endpoint=False)
        i0 = np.floor(coords).astype(int)
        t = coords - i0
        t = t * t * (3 - 2 * t)
        rows = lattice[i0] * (1 - t)[:, None] + lattice[i0 + 1] * t[:, None]
        layer = rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]
        field_ += layer * turbulence ** (-o)
    return field_


def cloud_mask(rng: np.random.Generator, size: int, coverage: float, turbulence: float = 1.5, softness: float = 0.15) -> np.ndarray:
    """Soft mask in [0, 1] whose mean equals ``coverage``.

    The noise field is rank-transformed to uniform scores ``u``; the mask
    ramps linearly from 0 to 1 across a band of width ``w`` centred on the
    ``1 - coverage`` quantile, so its mean is exactly the coverage.
    """
    if coverage <= 0.0:
        return np.zeros((size, size))
    if coverage >= 1.0:
        return np.ones((size, size))
    noise = _value_noise(rng, size, turbulence)
    ranks = np.empty(noise.size)
    ranks[np.argsort(noise, axis=None, kind="stable")] = np.arange(noise.size)
    u = ((ranks + 0.5) / noise.size).reshape(size, size)
    w = min(softness, 2 * coverage, 2 * (1 - coverage))
    return np.clip((u - (1.0 - coverage)) / w + 0.5, 0.0, 1.0)


def simulate_clouds(
    rgb: np.ndarray,
    seed: int,
    coverage: float,
    turbulence: float = 1.5,
    opacity: float = 1.0,
    fog_color: Sequence[float] = (255.0, 255.0, 255.0),
) -> np.ndarray:
    """Blend white fog into an optical raster (3 x H x W uint8)."""
    if not 0.0 <= coverage <= 1.0 or not 0.0 <= opacity <= 1.0:
        raise ConfigError("coverage and opacity must lie in [0, 1]")
    if coverage == 0.0 or opacity == 0.0:
        return rgb.copy()
    rng = np.random.default_rng(seed)
    m = cloud_mask(rng, rgb.shape[1], coverage, turbulence)[None] * opacity
    fog = np.asarray(fog_color, dtype=np.float64).reshape(3, 1, 1)
    out = (1.0 - m) * rgb.astype(np.float64) + m * fog
    return np.floor(out + 0.5).clip(0, 255).astype(np.uint8)


def _label_map(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    # every painted region draws its class from the priors independently of its
    # geometry, and the base grid covers everything, so each pixel's class
    # (that of its topmost region) follows the priors exactly
    s, k = spec.size, spec.num_classes
    priors = np.asarray(spec.area_priors)
    label = np.zeros((s, s), dtype=np.uint8)
    gy = int(rng.integers(spec.grid_range[0], spec.grid_range[1] + 1))
    gx = int(rng.integers(spec.grid_range[0], spec.grid_range[1] + 1))
    ys = np.concatenate([[0], np.sort(rng.choice(np.arange(1, s), gy - 1, replace=False)), [s]])
    xs = np.concatenate([[0], np.sort(rng.choice(np.arange(1, s), gx - 1, replace=False)), [s]])
    for i in range(gy):
        for j in range(gx):
            label[ys[i] : ys[i + 1], xs[j] : xs[j + 1]] = rng.choice(k, p=priors)
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(int(rng.integers(spec.shapes_range[0], spec.shapes_range[1] + 1))):
        cls = rng.choice(k, p=priors)
        cy, cx = rng.uniform(0, s, 2)
        ry, rx = rng.uniform(s / 16, s / 4, 2)
        if rng.random() < 0.5:
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
            v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
            mask = u * u + v * v <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        label[mask] = cls
    return label


def render_clean(spec: SceneSpec, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Label, cloud-free optical raster, stretched SAR and the cloud seed."""
    seed = sample_seed(spec.seed, index)
    rng = np.random.default_rng(seed)
    label = _label_map(rng, spec)
    s = spec.size
    pal = np.asarray(spec.palette)[label]  # H x W x 3
    tex = np.asarray(spec.texture)[label][..., None]
    optical = pal + tex * rng.standard_normal((s, s, 3))
    rgb = np.floor(optical + 0.5).clip(0, 255).astype(np.uint8).transpose(2, 0, 1).copy()
    speckle = rng.exponential(1.0, (spec.looks, s, s)).mean(axis=0)
    raw = np.asarray(spec.backscatter)[label] * speckle
    sar = sar_stretch(raw, spec.sar_lo_pct, spec.sar_hi_pct)[None]
    cloud_seed = int(rng.integers(0, 2**63))
    return label, rgb, sar, cloud_seed


def generate_scene(spec: SceneSpec, index: int) -> SceneSample:
    label, rgb, sar, cloud_seed = render_clean(spec, index)
    rgb = simulate_clouds(rgb, cloud_seed, spec.cloud_coverage, spec.turbulence, spec.opacity)
    return SceneSample(rgb, sar, label)


# ---------------------------------------------------------------------------
# on-disk format


def encode_sample(sample: SceneSample, num_classes: int) -> bytes:
    _, h, w = sample.rgb.shape
    return b"".join(
        (
            _HEADER.pack(MAGIC, h, w, num_classes),
            np.ascontiguousarray(sample.rgb, dtype=np.uint8).tobytes(),
            np.ascontiguousarray(sample.sar, dtype=np.uint8).tobytes(),
            np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes(),
        )
    )


def decode_sample(blob: bytes) -> Tuple[SceneSample, int]:
    magic, h, w, k = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"bad sample magic {magic!r}")
    n = h * w
    off = _HEADER.size
    if len(blob) != off + 5 * n:
        raise DataError(f"sample has {len(blob)} bytes, expected {off + 5 * n}")
    buf = np.frombuffer(blob, dtype=np.uint8, offset=off)
    rgb = buf[: 3 * n].reshape(3, h, w).copy()
    sar = buf[3 * n : 4 * n].reshape(1, h, w).copy()
    label = buf[4 * n :].reshape(h, w).copy()
    return SceneSample(rgb, sar, label), k


def write_sample(path, sample: SceneSample, num_classes: int) -> None:
    Path(path).write_bytes(encode_sample(sample, num_classes))


def read_sample(path) -> Tuple[SceneSample, int]:
    return decode_sample(Path(path).read_bytes())


def sample_name(index: int) -> str:
    return f"scene_{index:06d}.scne"


def make_dataset(spec: SceneSpec, n: int, out_dir) -> dict:
    """Write ``n`` samples plus ``manifest.json``; even indices train, odd val."""
    if n < 1 or n % 2:
        raise ConfigError(f"a 1:1 split needs an even sample count, got {n}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        train, val = [], []
        for i in range(n):
            name = sample_name(i)
            write_sample(out / name, generate_scene(spec, i), spec.num_classes)
            (train if i % 2 == 0 else val).append(name)
        manifest = {
            "format": "SCNE",
            "num_samples": n,
            "seed": spec.seed,
            "class_names": list(spec.class_names),
            "spec": spec.to_dict(),
            "split_rule": "even indices train, odd indices val",
            "train": train,
            "val": val,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    return json.loads(path.read_text())


def regenerate(manifest: dict, out_dir) -> dict:
    """Rebuild a dataset from its manifest alone."""
    return make_dataset(SceneSpec.from_dict(manifest["spec"]), manifest["num_samples"], out_dir)


@dataclass
class Split:
    """A dataset split held in memory."""

    rgb: np.ndarray  # N x 3 x H x W uint8
    sar: np.ndarray  # N x 1 x H x W uint8
    label: np.ndarray  # N x H x W uint8
    names: List[str]
    num_classes: int

    def __len__(self) -> int:
        return len(self.names)


def load_split(data_dir, split: str = "train") -> Split:
    manifest = load_manifest(data_dir)
    if split not in ("train", "val"):
        raise ConfigError(f"unknown split {split!r}")
    names = manifest[split]
    samples = [read_sample(Path(data_dir) / name) for name in names]
    ks = {k for _, k in samples}
    if len(ks) != 1:
        raise DataError(f"mixed class counts in {data_dir}: {sorted(ks)}")
    return Split(
        np.stack([s.rgb for s, _ in samples]),
        np.stack([s.sar for s, _ in samples]),
        np.stack([s.label for s, _ in samples]),
        list(names),
        ks.pop(),
    )


def render_split(spec: SceneSpec, indices: Sequence[int], coverage: float) -> Split:
    """Regenerate samples in memory with a different cloud coverage."""
    spec = replace(spec, cloud_coverage=coverage)
    samples = [generate_scene(spec, i) for i in indices]
    return Split(
        np.stack([s.rgb for s in samples]),
        np.stack([s.sar for s in samples]),
        np.stack([s.label for s in samples]),
        [sample_name(i) for i in indices],
        spec.num_classes,
    )
