"""Scale-consistent positional encodings for frustum samples.

Coordinates are shifted to the room's minimum corner and divided by the
largest power of two not exceeding the room extent, so a room scaled by
``2**k`` produces bit-identical normalised coordinates.  The number of
frequency levels per axis is chosen from a target spatial resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_D_MIN = 0.02
DEFAULT_DIR_LEVELS = 5


def _floor_log2(v: float) -> int:
    _, e = math.frexp(v)
    return e - 1


def _ceil_log2(v: float, rel_tol: float = 1e-9) -> int:
    mant, e = math.frexp(v)
    if mant == 0.5:
        return e - 1
    # values a rounding error above an exact power of two (0.64/0.02) snap down
    if abs(v - math.ldexp(1.0, e - 1)) <= rel_tol * v:
        return e - 1
    return e


@dataclass(frozen=True)
class SceneBounds:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)
        if len(lo) != 3 or len(hi) != 3 or any(h <= l for l, h in zip(lo, hi)):
            raise ValueError(f"invalid bounds {lo} .. {hi}")

    @classmethod
    def from_dims(cls, dims) -> "SceneBounds":
        return cls((0.0, 0.0, 0.0), tuple(dims))

    @property
    def range(self) -> tuple[float, float, float]:
        return tuple(h - l for l, h in zip(self.min, self.max))

    def scaled(self, factor: float) -> "SceneBounds":
        return SceneBounds(tuple(v * factor for v in self.min), tuple(v * factor for v in self.max))


@dataclass(frozen=True)
class EncodingConfig:
    bounds: SceneBounds
    d_min: float
    levels: tuple[int, int, int]
    q: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dir_levels: int = DEFAULT_DIR_LEVELS
    use_pe: bool = True
    use_ipe: bool = True

    @property
    def spatial_dim(self) -> int:
        per_block = 2 * sum(self.levels)
        return per_block * (int(self.use_pe) + int(self.use_ipe)) + 3

    @property
    def directional_dim(self) -> int:
        return 4 * self.dir_levels


def make_encoding_config(bounds: SceneBounds, d_min: float = DEFAULT_D_MIN, *, levels=None,
                         dir_levels: int = DEFAULT_DIR_LEVELS, scale_consistent: bool = True,
                         use_pe: bool = True, use_ipe: bool = True) -> EncodingConfig:
    """Derive per-axis normalisation factors and level counts.

    ``levels`` overrides the resolution-derived counts (per axis).  With
    ``scale_consistent=False`` the normalisation is dropped: raw world
    coordinates are encoded (q = 1, no shift), keeping the level counts.
    """
    if d_min <= 0:
        raise ValueError("d_min must be positive")
    if d_min >= min(bounds.range):
        raise ValueError(f"d_min={d_min} must be below the smallest room extent {min(bounds.range)}")
    if not (use_pe or use_ipe):
        raise ValueError("at least one of PE or IPE must be enabled")
    derived = tuple(1 + _ceil_log2(r / d_min) for r in bounds.range)
    if levels is None:
        levels = derived
    levels = tuple(int(v) for v in levels)
    if len(levels) != 3 or min(levels) < 1:
        raise ValueError(f"invalid level counts {levels}")
    if scale_consistent:
        q = tuple(math.ldexp(1.0, -_floor_log2(r)) for r in bounds.range)
        origin = bounds.min
    else:
        q = (1.0, 1.0, 1.0)
        origin = (0.0, 0.0, 0.0)
    return EncodingConfig(bounds, float(d_min), levels, q, origin, int(dir_levels), use_pe, use_ipe)


def normalize_coord(x, axis: int, cfg: EncodingConfig):
    return (np.asarray(x, dtype=float) - cfg.origin[axis]) * cfg.q[axis]


def normalize_points(points, cfg: EncodingConfig):
    points = np.asarray(points)
    return (points - np.asarray(cfg.origin, dtype=points.dtype)) * np.asarray(cfg.q, dtype=points.dtype)


def _frequencies(L: int, dtype=float):
    return (2.0 ** np.arange(L) * np.pi).astype(dtype)


def pe_scale_consistent(x, L: int):
    """[sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)] on the last axis."""
    if L < 1:
        raise ValueError("L must be at least 1")
    x = np.asarray(x, dtype=float)
    arg = x[..., None] * _frequencies(L)
    out = np.empty(x.shape + (2 * L,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def _ipe_axis(mu, var, L, dtype):
    freq = _frequencies(L, dtype)
    arg = mu[..., None] * freq
    damp = np.exp(-0.5 * var[..., None] * freq**2)
    out = np.empty(mu.shape + (2 * L,), dtype=dtype)
    out[..., 0::2] = np.sin(arg) * damp
    out[..., 1::2] = np.cos(arg) * damp
    return out


def ipe_arrays(mu, diag, cfg: EncodingConfig):
    """Integrated encoding for Gaussians with means ``mu`` and world-axis variances ``diag``."""
    mu = np.asarray(mu)
    dtype = mu.dtype if mu.dtype in (np.float32, np.float64) else np.float64
    mu_n = normalize_points(mu.astype(dtype), cfg)
    q2 = np.asarray(cfg.q, dtype=dtype) ** 2
    var_n = np.asarray(diag, dtype=dtype) * q2
    blocks = [_ipe_axis(mu_n[..., a], var_n[..., a], cfg.levels[a], dtype) for a in range(3)]
    return np.concatenate(blocks, axis=-1)


def ipe_scale_consistent(g, cfg: EncodingConfig):
    """IPE of a single :class:`~radiofield.sampling.FrustumGaussian`."""
    return ipe_arrays(np.asarray(g.mu, dtype=float), np.asarray(g.diag_world, dtype=float), cfg)


def pe_arrays(mu, cfg: EncodingConfig):
    mu = np.asarray(mu)
    dtype = mu.dtype if mu.dtype in (np.float32, np.float64) else np.float64
    zero = np.zeros(mu.shape[:-1], dtype=dtype)
    mu_n = normalize_points(mu.astype(dtype), cfg)
    return np.concatenate([_ipe_axis(mu_n[..., a], zero, cfg.levels[a], dtype) for a in range(3)], axis=-1)


def directional_encoding(theta, phi, L: int = DEFAULT_DIR_LEVELS):
    """Classic PE of elevation and azimuth angles, concatenated: length 4L."""
    return np.concatenate([pe_scale_consistent(theta, L), pe_scale_consistent(phi, L)], axis=-1)


def spatial_encoding(mu, diag, cfg: EncodingConfig):
    """Batched spatial features: PE(mu') | IPE | mu' (blocks dropped per config)."""
    mu = np.asarray(mu)
    dtype = mu.dtype if mu.dtype in (np.float32, np.float64) else np.float64
    mu = mu.astype(dtype)
    parts = []
    if cfg.use_pe:
        parts.append(pe_arrays(mu, cfg))
    if cfg.use_ipe:
        parts.append(ipe_arrays(mu, diag, cfg))
    parts.append(normalize_points(mu, cfg))
    out = np.concatenate(parts, axis=-1)
    assert out.shape[-1] == cfg.spatial_dim
    return out


@dataclass(frozen=True)
class EncodedSample:
    spatial: np.ndarray
    directional: np.ndarray

    @property
    def dims(self) -> tuple[int, int]:
        return self.spatial.shape[-1], self.directional.shape[-1]


def hybrid_encode(g, theta: float, phi: float, cfg: EncodingConfig) -> EncodedSample:
    spatial = spatial_encoding(np.asarray(g.mu, dtype=float), np.asarray(g.diag_world, dtype=float), cfg)
    if cfg.use_pe and cfg.use_ipe and spatial.shape[-1] != 4 * sum(cfg.levels) + 3:
        raise AssertionError("hybrid encoding width mismatch")
    return EncodedSample(spatial, directional_encoding(theta, phi, cfg.dir_levels))
