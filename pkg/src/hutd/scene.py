"""Hyperspectral cube I/O (ENVI), ground-truth masks (PGM), spectrum CSVs,
and a parametric synthetic nearshore scene generator.

The generator places rectangular submerged targets over a multi-material
background. A target at depth d mixes the reference signature toward a water
spectrum with a per-band exponential water-column weight:

    r(lam) = r_water(lam) * (1 - exp(-2*K(lam)*d)) + r_ref(lam) * exp(-2*K(lam)*d)

Attenuation K and all material spectra are configuration, not physics claims.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SceneError(Exception):
    pass


@dataclass
class HsiCube:
    """H x W x B reflectance volume with band wavelengths in nm."""

    data: np.ndarray  # (H, W, B) float64
    wavelengths: np.ndarray  # (B,) strictly increasing

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        if self.data.ndim != 3:
            raise SceneError("cube data must be H x W x B")
        if self.data.shape[2] != self.wavelengths.shape[0]:
            raise SceneError("band count does not match wavelength count")
        if np.any(np.diff(self.wavelengths) <= 0):
            raise SceneError("wavelengths must be strictly increasing")
        if not np.isfinite(self.data).all() or np.any(self.data < 0):
            raise SceneError("reflectances must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass
class Spectrum:
    values: np.ndarray
    wavelengths: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        if self.values.shape != self.wavelengths.shape:
            raise SceneError("spectrum values and wavelengths differ in length")


@dataclass
class GroundTruth:
    mask: np.ndarray  # (H, W) bool, True = target

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise SceneError("mask must be 2-D")


@dataclass
class TargetSpec:
    """Axis-aligned rectangle of target pixels submerged at depth_m metres."""

    row: int
    col: int
    height: int
    width: int
    depth_m: float


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    bands: int = 60
    materials: int = 6
    targets: list = field(
        default_factory=lambda: [
            TargetSpec(10, 10, 6, 6, 0.5),
            TargetSpec(30, 40, 6, 6, 1.5),
            TargetSpec(48, 18, 6, 6, 2.5),
        ]
    )
    wavelength_start: float = 400.0
    wavelength_end: float = 1000.0
    attenuation_min: float = 0.15  # K at the first band, 1/m
    attenuation_max: float = 0.6  # K at the last band, 1/m
    noise: float = 0.02
    seed: int = 0

    def wavelengths(self) -> np.ndarray:
        return np.linspace(self.wavelength_start, self.wavelength_end, self.bands)

    def attenuation(self) -> np.ndarray:
        return np.linspace(self.attenuation_min, self.attenuation_max, self.bands)

    def validate(self) -> None:
        if self.bands < 2:
            raise SceneError("scene needs at least 2 bands")
        if not self.targets:
            raise SceneError("at least one target is required")
        if self.materials < 1:
            raise SceneError("at least one background material is required")
        if self.noise < 0:
            raise SceneError("noise level must be >= 0")
        occupied = np.zeros((self.height, self.width), dtype=bool)
        for t in self.targets:
            if t.depth_m < 0:
                raise SceneError("target depth must be >= 0")
            if t.row < 0 or t.col < 0 or t.height <= 0 or t.width <= 0:
                raise SceneError(f"bad target rectangle {t}")
            if t.row + t.height > self.height or t.col + t.width > self.width:
                raise SceneError(f"target {t} exceeds scene bounds")
            block = occupied[t.row : t.row + t.height, t.col : t.col + t.width]
            if block.any():
                raise SceneError("target rectangles overlap")
            block[...] = True


# ---------------------------------------------------------------------------
# ENVI reader / writer


_DTYPE_CODES = {4: np.dtype("float32"), 12: np.dtype("uint16")}
_MANDATORY_KEYS = ("samples", "lines", "bands", "interleave", "data type", "byte order")


def _parse_envi_header(text: str) -> dict:
    header = {}
    body = text
    if body.lstrip().startswith("ENVI"):
        body = body.lstrip()[4:]
    # brace values ({...}) may span lines; flatten them first
    body = re.sub(r"\{[^}]*\}", lambda m: m.group(0).replace("\n", " "), body)
    for line in body.splitlines():
        if "=" not in line:
            continue
        key, value = line.split("=", 1)
        header[key.strip().lower()] = value.strip()
    return header


def load_envi(header_path, data_path) -> HsiCube:
    """Load an ENVI cube into canonical (H, W, B) layout."""
    text = Path(header_path).read_text()
    header = _parse_envi_header(text)
    for key in _MANDATORY_KEYS:
        if key not in header:
            raise SceneError(f"missing mandatory header key {key!r}")
    samples = int(header["samples"])
    lines = int(header["lines"])
    bands = int(header["bands"])
    interleave = header["interleave"].lower()
    dtype_code = int(header["data type"])
    if dtype_code not in _DTYPE_CODES:
        raise SceneError(f"unsupported data type code {dtype_code}")
    dtype = _DTYPE_CODES[dtype_code]
    byte_order = int(header["byte order"])
    dtype = dtype.newbyteorder("<" if byte_order == 0 else ">")

    raw = Path(data_path).read_bytes()
    expected = samples * lines * bands * dtype.itemsize
    if len(raw) != expected:
        raise SceneError(
            f"truncated or oversized data file: expected {expected} bytes, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype=dtype)
    if interleave == "bsq":
        cube = flat.reshape(bands, lines, samples).transpose(1, 2, 0)
    elif interleave == "bil":
        cube = flat.reshape(lines, bands, samples).transpose(0, 2, 1)
    elif interleave == "bip":
        cube = flat.reshape(lines, samples, bands)
    else:
        raise SceneError(f"unknown interleave {interleave!r}")

    if "wavelength" in header:
        wl_text = header["wavelength"].strip().strip("{}")
        wavelengths = np.array([float(v) for v in wl_text.split(",") if v.strip()])
        if wavelengths.size != bands:
            raise SceneError("wavelength count does not match band count")
    else:
        wavelengths = np.arange(bands, dtype=np.float64)
    return HsiCube(cube.astype(np.float64), wavelengths)


def save_envi(cube: HsiCube, header_path, data_path) -> None:
    """Write bsq / 32-bit float / little-endian ENVI files."""
    if cube.height == 0 or cube.width == 0:
        raise SceneError("cannot save an empty spatial region")
    if cube.bands == 0:
        raise SceneError("cannot save a zero-band cube")
    wl = ", ".join(format(v, ".6f") for v in cube.wavelengths)
    header = (
        "ENVI\n"
        f"samples = {cube.width}\n"
        f"lines = {cube.height}\n"
        f"bands = {cube.bands}\n"
        "interleave = bsq\n"
        "data type = 4\n"
        "byte order = 0\n"
        f"wavelength = {{ {wl} }}\n"
    )
    Path(header_path).write_text(header)
    bsq = cube.data.transpose(2, 0, 1).astype("<f4")
    Path(data_path).write_bytes(bsq.tobytes())


# ---------------------------------------------------------------------------
# Pixel access


def extract_pixels(cube: HsiCube) -> list:
    """Row-major pixel spectra; index i maps to (i // W, i % W)."""
    flat = cube.data.reshape(-1, cube.bands)
    return [Spectrum(flat[i].copy(), cube.wavelengths) for i in range(flat.shape[0])]


def pixel_matrix(cube: HsiCube) -> np.ndarray:
    """(H*W, B) row-major reflectance matrix (copy)."""
    return cube.data.reshape(-1, cube.bands).copy()


# ---------------------------------------------------------------------------
# Synthetic scene generation


def _smooth_spectrum(rng, wavelengths, base_range, bump_range, n_bumps=3):
    base = rng.uniform(*base_range)
    r = np.full_like(wavelengths, base)
    for _ in range(n_bumps):
        amp = rng.uniform(*bump_range)
        mu = rng.uniform(wavelengths[0], wavelengths[-1])
        sig = rng.uniform(40.0, 160.0)
        r += amp * np.exp(-((wavelengths - mu) ** 2) / (2.0 * sig**2))
    return np.clip(r, 0.01, 1.2)


def water_spectrum(wavelengths: np.ndarray) -> np.ndarray:
    """Low-reflectance water column: blue-green peak decaying into the NIR."""
    return 0.01 + 0.09 * np.exp(-(((wavelengths - 450.0) / 120.0) ** 2))


def submerged_spectrum(ref, water, attenuation, depth_m):
    w = np.exp(-2.0 * attenuation * depth_m)
    return water * (1.0 - w) + ref * w


def synth_scene(cfg: SceneConfig):
    """Generate (HsiCube, GroundTruth, reference Spectrum), seeded."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    wl = cfg.wavelengths()
    atten = cfg.attenuation()

    water = water_spectrum(wl)
    materials = [water]
    for _ in range(cfg.materials - 1):
        materials.append(_smooth_spectrum(rng, wl, (0.03, 0.15), (0.05, 0.35)))
    ref = _smooth_spectrum(rng, wl, (0.20, 0.30), (0.15, 0.40))

    # Voronoi material field: a few seed points per material, nearest wins.
    points_per_material = 3
    seeds_rc = rng.uniform(
        0, [cfg.height, cfg.width], size=(cfg.materials * points_per_material, 2)
    )
    seed_material = np.repeat(np.arange(cfg.materials), points_per_material)
    rows, cols = np.mgrid[0 : cfg.height, 0 : cfg.width]
    d2 = (rows[..., None] - seeds_rc[:, 0]) ** 2 + (cols[..., None] - seeds_rc[:, 1]) ** 2
    material_field = seed_material[np.argmin(d2, axis=2)]

    # Force a water lagoon around each target so submerged targets sit in water.
    margin = 4
    for t in cfg.targets:
        r0 = max(0, t.row - margin)
        c0 = max(0, t.col - margin)
        r1 = min(cfg.height, t.row + t.height + margin)
        c1 = min(cfg.width, t.col + t.width + margin)
        material_field[r0:r1, c0:c1] = 0

    data = np.array(materials)[material_field]  # (H, W, B)

    mask = np.zeros((cfg.height, cfg.width), dtype=bool)
    for t in cfg.targets:
        data[t.row : t.row + t.height, t.col : t.col + t.width] = submerged_spectrum(
            ref, water, atten, t.depth_m
        )
        mask[t.row : t.row + t.height, t.col : t.col + t.width] = True

    if cfg.noise > 0:
        data = data + rng.normal(0.0, cfg.noise, size=data.shape)
    data = np.clip(data, 0.0, None)

    return HsiCube(data, wl), GroundTruth(mask), Spectrum(ref, wl)


def normalize_cube(cube: HsiCube) -> HsiCube:
    """Affine map of the scene's global min/max onto [0, 1]."""
    lo = float(cube.data.min())
    hi = float(cube.data.max())
    if hi <= lo:
        raise SceneError("cannot normalize a constant cube")
    return HsiCube((cube.data - lo) / (hi - lo), cube.wavelengths)


def scene_min_max(cube: HsiCube) -> tuple:
    return float(cube.data.min()), float(cube.data.max())


# ---------------------------------------------------------------------------
# Masks (PGM P5), spectrum CSVs, scene directories


def save_pgm(values: np.ndarray, path) -> None:
    """8-bit binary PGM. Boolean arrays map to {0, 255}; floats are
    min-max stretched."""
    if values.dtype == bool:
        img = np.where(values, 255, 0).astype(np.uint8)
    else:
        v = np.asarray(values, dtype=np.float64)
        lo, hi = v.min(), v.max()
        if hi > lo:
            img = np.round(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)
        else:
            img = np.zeros_like(v, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise SceneError("not a binary PGM (P5) file")
    fields = []
    idx = 2
    while len(fields) < 3:
        while idx < len(raw) and raw[idx : idx + 1].isspace():
            idx += 1
        if raw[idx : idx + 1] == b"#":
            while idx < len(raw) and raw[idx : idx + 1] != b"\n":
                idx += 1
            continue
        start = idx
        while idx < len(raw) and not raw[idx : idx + 1].isspace():
            idx += 1
        fields.append(int(raw[start:idx]))
    idx += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise SceneError("only 8-bit PGM supported")
    img = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=idx)
    if img.size != w * h:
        raise SceneError("truncated PGM payload")
    return img.reshape(h, w)


def save_mask(gt: GroundTruth, path) -> None:
    save_pgm(gt.mask, path)


def load_mask(path) -> GroundTruth:
    return GroundTruth(load_pgm(path) > 127)


def save_spectrum_csv(spec: Spectrum, path) -> None:
    lines = ["wavelength,value"]
    for wl, v in zip(spec.wavelengths, spec.values):
        lines.append(f"{float(wl)!r},{float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_spectrum_csv(path) -> Spectrum:
    wl, vals = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.lower().startswith("wavelength"):
            continue
        a, b = line.split(",")
        wl.append(float(a))
        vals.append(float(b))
    return Spectrum(np.array(vals), np.array(wl))


def save_scene_dir(out_dir, cube: HsiCube, gt: GroundTruth, ref: Spectrum) -> dict:
    """Write the on-disk scene layout consumed by training and detection:
    scene.hdr + scene.dat (ENVI bsq float32), truth.pgm (P5), reference.csv.

    Field-collected scenes arranged the same way load through
    `load_scene_dir` unchanged; no proprietary archive reader is provided.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "header": out / "scene.hdr",
        "data": out / "scene.dat",
        "mask": out / "truth.pgm",
        "reference": out / "reference.csv",
    }
    save_envi(cube, paths["header"], paths["data"])
    save_mask(gt, paths["mask"])
    save_spectrum_csv(ref, paths["reference"])
    return {k: str(v) for k, v in paths.items()}


def load_scene_dir(scene_dir):
    """Load (cube, ground truth or None, reference spectrum) from a scene dir."""
    d = Path(scene_dir)
    header, data = d / "scene.hdr", d / "scene.dat"
    if not header.exists() or not data.exists():
        raise SceneError(f"scene directory {scene_dir} lacks scene.hdr/scene.dat")
    cube = load_envi(header, data)
    mask_path = d / "truth.pgm"
    gt = load_mask(mask_path) if mask_path.exists() else None
    ref_path = d / "reference.csv"
    if not ref_path.exists():
        raise SceneError(f"scene directory {scene_dir} lacks reference.csv")
    ref = load_spectrum_csv(ref_path)
    if ref.values.shape[0] != cube.bands:
        raise SceneError("reference spectrum band count does not match cube")
    return cube, gt, ref
