"""Ray construction, coarse/fine depth sampling and conical frustum moments.

Every routine works on the last axis so that a whole batch of rays, shape
``(n_rays, m + 1)`` for depths, is processed in one call; the dataclass
wrappers exist for single-ray use and for the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

T_ORIGIN = 1e-3
NUDGE = 1e-9
DEFAULT_CONE_RATIO = float(np.sin(np.deg2rad(0.1)))


def direction_from_angles(theta, phi):
    """Unit vectors for polar angle ``theta`` (from +z) and azimuth ``phi`` (from +x)."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def angles_from_direction(d):
    d = np.asarray(d, dtype=float)
    theta = np.arccos(np.clip(d[..., 2] / np.linalg.norm(d, axis=-1), -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    return theta, phi


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    cone_ratio: float = DEFAULT_CONE_RATIO

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise ValueError("ray direction must be a unit vector")
        if self.cone_ratio <= 0:
            raise ValueError("cone_ratio must be positive")

    @classmethod
    def from_angles(cls, origin, theta, phi, cone_ratio=DEFAULT_CONE_RATIO):
        return cls(origin, direction_from_angles(theta, phi), cone_ratio)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class DepthPartition:
    depths: np.ndarray
    stage: str = "coarse"

    def __post_init__(self):
        depths = np.asarray(self.depths, dtype=float)
        object.__setattr__(self, "depths", depths)
        if self.stage not in ("coarse", "fine"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if depths.ndim != 1 or depths.size < 2:
            raise ValueError("need at least two depths")
        if depths[0] != T_ORIGIN:
            raise ValueError(f"first depth must be {T_ORIGIN}")
        if np.any(np.diff(depths) <= 0):
            raise ValueError("depths must be strictly increasing")

    @property
    def m(self) -> int:
        return self.depths.size - 1


@dataclass(frozen=True)
class SamplerConfig:
    m: int = 128
    t_near: float = T_ORIGIN
    t_far: float = 15.0
    epsilon: float = 0.01
    cone_ratio: float = DEFAULT_CONE_RATIO

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be at least 2")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be below t_far")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


def enforce_increasing(depths, nudge=NUDGE):
    """Push ties (and inversions) up so each depth exceeds its predecessor by ``nudge``."""
    depths = np.asarray(depths, dtype=float)
    k = np.arange(depths.shape[-1]) * nudge
    return np.maximum.accumulate(depths - k, axis=-1) + k


def stratified_depths(cfg: SamplerConfig, rng, shape=()):
    """Batched stratified draw; returns ``shape + (m + 1,)`` depths.

    With ``rng=None`` every bin contributes its midpoint, which is what
    inference uses so that a prediction depends only on the ray itself.
    """
    shape = tuple(np.atleast_1d(shape)) if shape != () else ()
    edges = np.linspace(cfg.t_near, cfg.t_far, cfg.m + 1)
    u = np.full(shape + (cfg.m,), 0.5) if rng is None else rng.random(shape + (cfg.m,))
    draws = edges[:-1] + u * np.diff(edges)
    origin = np.full(shape + (1,), T_ORIGIN)
    return enforce_increasing(np.concatenate([origin, draws], axis=-1))


def stratified_coarse(cfg: SamplerConfig, rng) -> DepthPartition:
    return DepthPartition(stratified_depths(cfg, rng), "coarse")


def filter_weights(w):
    """Max-blur along the last axis with edge replication."""
    w = np.asarray(w, dtype=float)
    padded = np.concatenate([w[..., :1], w, w[..., -1:]], axis=-1)
    left = np.maximum(padded[..., :-2], padded[..., 1:-1])
    right = np.maximum(padded[..., 1:-1], padded[..., 2:])
    return 0.5 * (left + right)


@dataclass(frozen=True)
class PiecewiseLinearCDF:
    """Normalised CDF given by its values at the partition knots."""

    knots: np.ndarray
    values: np.ndarray = field(repr=False)

    def __call__(self, t):
        return batched_interp(t, self.knots, self.values)

    def inverse(self, u):
        return batched_interp_inverse(u, self.knots, self.values)

    def density(self, t):
        """Derivative of the CDF (piecewise constant)."""
        t = np.asarray(t, dtype=float)
        slope = np.diff(self.values) / np.diff(self.knots)
        idx = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, slope.size - 1)
        inside = (t >= self.knots[0]) & (t <= self.knots[-1])
        return np.where(inside, slope[idx], 0.0)


def cdf_values(depths, w_filtered, epsilon):
    """Normalised knot values of F(t) = (t - t1) eps + cumulative interval mass."""
    depths = np.asarray(depths, dtype=float)
    w_filtered = np.asarray(w_filtered, dtype=float)
    if depths.shape[-1] != w_filtered.shape[-1] + 1:
        raise ValueError("need one weight per interval")
    mass = np.concatenate([np.zeros(w_filtered.shape[:-1] + (1,)), np.cumsum(w_filtered, axis=-1)], axis=-1)
    raw = (depths - depths[..., :1]) * epsilon + mass
    total = raw[..., -1:]
    if np.any(total <= 0):
        raise ValueError("degenerate CDF: zero total mass with zero base density")
    values = raw / total
    values[..., -1] = 1.0
    return values


def build_cdf(partition: DepthPartition, w_filtered, epsilon) -> PiecewiseLinearCDF:
    return PiecewiseLinearCDF(partition.depths, cdf_values(partition.depths, w_filtered, epsilon))


def _row_offsets(values):
    # shift row r by 2r so a single flat searchsorted handles every row
    lead = values.shape[:-1]
    return (2.0 * np.arange(int(np.prod(lead, dtype=int)))).reshape(lead + (1,))


def batched_interp(t, knots, values):
    """Evaluate piecewise-linear functions row-wise; rows share leading shape."""
    knots = np.asarray(knots, dtype=float)
    values = np.asarray(values, dtype=float)
    t = np.asarray(t, dtype=float)
    if knots.ndim == 1:
        return np.interp(t, knots, values)
    out = np.empty(t.shape)
    for idx in np.ndindex(knots.shape[:-1]):
        out[idx] = np.interp(t[idx], knots[idx], values[idx])
    return out


def batched_interp_inverse(u, knots, values):
    """Solve F(t) = u per row for piecewise-linear, non-decreasing F.

    Flat segments (zero mass) are skipped: ``u`` lands in the first segment
    whose upper value exceeds it.
    """
    knots = np.asarray(knots, dtype=float)
    values = np.asarray(values, dtype=float)
    u = np.asarray(u, dtype=float)
    squeeze = knots.ndim == 1
    if squeeze:
        u_shape = u.shape
        knots, values, u = knots[None], values[None], u.reshape(1, -1)
    m = knots.shape[-1] - 1
    off = _row_offsets(values)
    pos = np.searchsorted((values + off).ravel(), (u + off).ravel(), side="right").reshape(u.shape)
    row_start = (np.arange(off.size) * (m + 1)).reshape(off.shape)
    seg = np.clip(pos - row_start - 1, 0, m - 1)
    f_lo = np.take_along_axis(values, seg, -1)
    f_hi = np.take_along_axis(values, seg + 1, -1)
    t_lo = np.take_along_axis(knots, seg, -1)
    t_hi = np.take_along_axis(knots, seg + 1, -1)
    span = f_hi - f_lo
    frac = np.where(span > 0, (u - f_lo) / np.where(span > 0, span, 1.0), 0.0)
    t = t_lo + np.clip(frac, 0.0, 1.0) * (t_hi - t_lo)
    if squeeze:
        t = t[0].reshape(u_shape)
    return t


def fine_depths(depths, weights, epsilon, m, rng):
    """Batched importance resampling: filter, build CDF, invert ``m`` uniforms.

    ``weights`` are the coarse interval weights, shape ``(..., m_coarse)``.
    Returns sorted fine depths with the fixed origin sample prepended.
    ``rng=None`` replaces the uniforms by the evenly spaced quantiles
    ``(k + 1/2) / m``.
    """
    depths = np.asarray(depths, dtype=float)
    values = cdf_values(depths, filter_weights(weights), epsilon)
    if rng is None:
        u = np.broadcast_to((np.arange(m) + 0.5) / m, depths.shape[:-1] + (m,))
    else:
        u = rng.random(depths.shape[:-1] + (m,))
    t = np.sort(batched_interp_inverse(u, depths, values), axis=-1)
    origin = np.full(depths.shape[:-1] + (1,), depths[..., :1])
    return enforce_increasing(np.concatenate([origin, t], axis=-1))


def inverse_cdf_sample(cdf: PiecewiseLinearCDF, m: int, rng) -> DepthPartition:
    u = rng.random(m)
    t = np.sort(cdf.inverse(u))
    depths = enforce_increasing(np.concatenate([cdf.knots[:1], t]))
    return DepthPartition(depths, "fine")


def frustum_moments(t_lo, t_hi, cone_ratio):
    """Axial mean, axial variance and per-axis radial variance of a conical frustum.

    Written in the half-width/midpoint form so thin frustums (t_hi - t_lo much
    smaller than t_lo) keep their precision:

        mean   = c + 2 c h^2 / (3 c^2 + h^2)
        var_t  = h^2 / 3 - (4/15) h^4 (12 c^2 - h^2) / (3 c^2 + h^2)^2
        E[t^2] = 3/5 (a^4 + a^3 b + a^2 b^2 + a b^3 + b^4) / (a^2 + a b + b^2)
        var_r  = cone_ratio^2 / 4 * E[t^2]

    with c the midpoint and h the half-width of [a, b] = [t_lo, t_hi].
    """
    a = np.asarray(t_lo, dtype=float)
    b = np.asarray(t_hi, dtype=float)
    if np.any(a <= 0):
        raise ValueError("frustum near bound must be positive")
    if np.any(b <= a):
        raise ValueError("frustum bounds must satisfy t_lo < t_hi")
    c = 0.5 * (a + b)
    h = 0.5 * (b - a)
    c2, h2 = c * c, h * h
    den = 3.0 * c2 + h2
    mu_t = c + 2.0 * c * h2 / den
    sigma_t = h2 / 3.0 - (4.0 / 15.0) * h2 * h2 * (12.0 * c2 - h2) / (den * den)
    a2, b2, ab = a * a, b * b, a * b
    second = 0.6 * (a2 * a2 + a2 * ab + ab * ab + ab * b2 + b2 * b2) / (a2 + ab + b2)
    sigma_r = 0.25 * cone_ratio**2 * second
    return mu_t, sigma_t, sigma_r


@dataclass(frozen=True)
class FrustumGaussian:
    mu: np.ndarray
    sigma_t: float
    sigma_r: float
    mu_t: float
    diag_world: np.ndarray


def world_diagonal(direction, sigma_t, sigma_r):
    """Diagonal of sigma_t d d^T + sigma_r (I - d d^T)."""
    d2 = np.asarray(direction) ** 2
    return np.asarray(sigma_t)[..., None] * d2 + np.asarray(sigma_r)[..., None] * (1.0 - d2)


def frustum_gaussian(ray: Ray, t_lo, t_hi) -> FrustumGaussian:
    mu_t, sigma_t, sigma_r = frustum_moments(t_lo, t_hi, ray.cone_ratio)
    mu = ray.origin + mu_t * ray.direction
    diag = world_diagonal(ray.direction, sigma_t, sigma_r)
    return FrustumGaussian(mu, float(sigma_t), float(sigma_r), float(mu_t), diag)


def frustum_batch(origins, directions, depths, cone_ratio):
    """Gaussians for every interval of every ray.

    Args:
        origins, directions: ``(R, 3)``.
        depths: ``(R, m + 1)``.

    Returns:
        ``mu (R, m, 3)``, ``diag (R, m, 3)``, ``mu_t (R, m)``.
    """
    mu_t, sigma_t, sigma_r = frustum_moments(depths[:, :-1], depths[:, 1:], cone_ratio)
    mu = origins[:, None, :] + mu_t[..., None] * directions[:, None, :]
    diag = world_diagonal(directions[:, None, :], sigma_t, sigma_r)
    return mu, diag, mu_t
