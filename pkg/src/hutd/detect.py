"""Pixel-wise similarity detectors over learned embeddings or raw spectra:
spectral-angle (SAM, reported as cosine so higher = more target-like) and
constrained energy minimization (CEM, unit gain on the reference)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nets import NetworkBundle
from .scene import HsiCube, Spectrum, save_pgm


class DetectError(Exception):
    pass


@dataclass
class ScoreMap:
    scores: np.ndarray  # (H, W), finite, higher = more target-like
    detector: str  # sam | cem
    feature_space: str  # embedding | raw

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise DetectError("score map must be 2-D")
        if not np.isfinite(self.scores).all():
            raise DetectError("score map contains non-finite values")

    @property
    def name(self) -> str:
        return self.detector if self.feature_space == "embedding" else f"{self.detector}-raw"

    def flat(self) -> np.ndarray:
        return self.scores.reshape(-1)


def embed_scene(cube: HsiCube, bundle: NetworkBundle, ref: Spectrum):
    """Frozen-encoder features for every pixel plus the reference; pure."""
    if cube.bands != bundle.bands:
        raise DetectError(
            f"cube has {cube.bands} bands but the encoder expects {bundle.bands}"
        )
    if ref.values.shape[0] != cube.bands:
        raise DetectError("reference spectrum band count does not match cube")
    pixels = cube.data.reshape(-1, cube.bands)
    z = bundle.encode_np(pixels)
    z_ref = bundle.encode_np(ref.values[None, :])[0]
    return z, z_ref


def sam_scores(z: np.ndarray, z_ref: np.ndarray) -> np.ndarray:
    """Cosine of the spectral angle per row, in [-1, 1]."""
    z = np.asarray(z, dtype=np.float64)
    z_ref = np.asarray(z_ref, dtype=np.float64)
    row_norms = np.linalg.norm(z, axis=1)
    ref_norm = np.linalg.norm(z_ref)
    if ref_norm == 0.0 or np.any(row_norms == 0.0):
        raise DetectError("SAM requires nonzero vectors")
    return (z @ z_ref) / (row_norms * ref_norm)


def cem_scores(z: np.ndarray, z_ref: np.ndarray) -> np.ndarray:
    """Unit-gain minimum-energy filter response w = R^-1 r / (r^T R^-1 r),
    with a small ridge on the sample correlation matrix R."""
    z = np.asarray(z, dtype=np.float64)
    z_ref = np.asarray(z_ref, dtype=np.float64)
    n, d = z.shape
    corr = (z.T @ z) / n
    ridge = 1e-6 * np.trace(corr) / d
    corr_reg = corr + ridge * np.eye(d)
    try:
        r_inv_ref = np.linalg.solve(corr_reg, z_ref)
    except np.linalg.LinAlgError as exc:
        raise DetectError("correlation matrix singular even after ridge") from exc
    gain = z_ref @ r_inv_ref
    if gain == 0.0:
        raise DetectError("reference has zero energy under the scene correlation")
    w = r_inv_ref / gain
    return z @ w


def sam(z: np.ndarray, z_ref: np.ndarray, shape: tuple, feature_space: str = "embedding") -> ScoreMap:
    return ScoreMap(sam_scores(z, z_ref).reshape(shape), "sam", feature_space)


def cem(z: np.ndarray, z_ref: np.ndarray, shape: tuple, feature_space: str = "embedding") -> ScoreMap:
    return ScoreMap(cem_scores(z, z_ref).reshape(shape), "cem", feature_space)


def sam_raw(cube: HsiCube, ref: Spectrum) -> ScoreMap:
    pixels = cube.data.reshape(-1, cube.bands)
    return sam(pixels, ref.values, (cube.height, cube.width), feature_space="raw")


def cem_raw(cube: HsiCube, ref: Spectrum) -> ScoreMap:
    pixels = cube.data.reshape(-1, cube.bands)
    return cem(pixels, ref.values, (cube.height, cube.width), feature_space="raw")


def run_detector(name: str, cube: HsiCube, ref: Spectrum, bundle: NetworkBundle | None) -> ScoreMap:
    """Dispatch one of sam | cem | sam-raw | cem-raw."""
    if name == "sam-raw":
        return sam_raw(cube, ref)
    if name == "cem-raw":
        return cem_raw(cube, ref)
    if name in ("sam", "cem"):
        if bundle is None:
            raise DetectError(f"detector {name!r} needs a trained encoder checkpoint")
        z, z_ref = embed_scene(cube, bundle, ref)
        fn = sam if name == "sam" else cem
        return fn(z, z_ref, (cube.height, cube.width))
    raise DetectError(f"unknown detector {name!r}")


def save_score_map(score_map: ScoreMap, out_dir, stem: str | None = None) -> dict:
    """Raw little-endian float32 grid, a CSV grid, and a stretched PGM."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or score_map.name
    paths = {
        "raw": out / f"{stem}.f32",
        "csv": out / f"{stem}.csv",
        "pgm": out / f"{stem}.pgm",
    }
    paths["raw"].write_bytes(score_map.scores.astype("<f4").tobytes())
    rows = [",".join(repr(float(v)) for v in row) for row in score_map.scores]
    paths["csv"].write_text("\n".join(rows) + "\n")
    save_pgm(score_map.scores, paths["pgm"])
    return {k: str(v) for k, v in paths.items()}
