"""Volumetric channel synthesis and the NMSE objective.

Along each ray the interval emission weight is the interval opacity times
the transmittance accumulated before it; a ray's CFR is the sum of
interval amplitudes scaled by free-space loss, carrier phase and the ray's
interaction attenuation.  Receiver CFRs are plain sums of ray CFRs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physics import C0

NMSE_FLOOR_DB = -100.0


@dataclass
class RayPrediction:
    depths: np.ndarray
    sigma: np.ndarray
    x: np.ndarray
    mu_t: np.ndarray
    zeta: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.depths).shape[-1] - 1
        for name in ("sigma", "x", "mu_t"):
            if np.asarray(getattr(self, name)).shape[-1] != m:
                raise ValueError(f"{name} must have one entry per interval")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("densities must be non-negative")


def emission_weights(sigma, depths):
    """nu_k = (1 - exp(-sigma_k dt_k)) * exp(-sum_{l<k} sigma_l dt_l) along the last axis."""
    sigma = np.asarray(sigma)
    tau = sigma * np.diff(np.asarray(depths, dtype=sigma.dtype), axis=-1)
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-(acc - tau))
    return -np.expm1(-tau) * trans


def carrier_factor(mu_t, fc):
    """Free-space amplitude times carrier phasor at each interval's mean distance."""
    mu_t = np.asarray(mu_t, dtype=float)
    if np.any(mu_t <= 0):
        raise ValueError("interval mean distances must be positive")
    return C0 / (4.0 * np.pi * mu_t * fc) * np.exp(-2j * np.pi * fc * mu_t / C0)


def ray_cfr(nu, x, mu_t, zeta, fc):
    """Batched ray CFRs: sum_k A(mu_t) P(mu_t) nu_k zeta x_k over the last axis."""
    coef = carrier_factor(mu_t, fc) * np.asarray(zeta)[..., None]
    return np.sum(coef * nu * x, axis=-1)


def synthesize_ray(pred: RayPrediction, fc: float) -> complex:
    nu = emission_weights(np.asarray(pred.sigma, dtype=float), pred.depths)
    return complex(ray_cfr(nu, np.asarray(pred.x), pred.mu_t, pred.zeta, fc))


def synthesize_receiver(ray_cfrs) -> complex:
    total = 0j
    for h in ray_cfrs:
        total += complex(h)
    return total


def group_sum(values, groups, n_groups: int):
    """Sum complex per-ray values into ``n_groups`` receivers in a fixed order."""
    values = np.asarray(values)
    re = np.bincount(groups, weights=values.real, minlength=n_groups)
    im = np.bincount(groups, weights=values.imag, minlength=n_groups)
    return re + 1j * im


def nmse(h_pred, h_true) -> float:
    """Batch NMSE sum|H_true - H_pred|^2 / sum|H_true|^2."""
    h_pred = np.asarray(h_pred)
    h_true = np.asarray(h_true)
    if h_pred.shape != h_true.shape:
        raise ValueError("prediction and truth batches differ in length")
    denom = float(np.sum(np.abs(h_true) ** 2))
    if denom <= 0:
        raise ValueError("ground-truth batch has zero energy")
    return float(np.sum(np.abs(h_true - h_pred) ** 2)) / denom


def to_db(value, floor: float = NMSE_FLOOR_DB):
    value = np.asarray(value, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.maximum(10.0 * np.log10(value), floor)
    return float(out) if out.ndim == 0 else out


def nmse_db(h_pred, h_true) -> float:
    return to_db(nmse(h_pred, h_true))


def training_loss(h_coarse, h_fine, h_true, w_c: float = 0.1, w_f: float = 0.9) -> float:
    if not np.isclose(w_c + w_f, 1.0):
        raise ValueError("stage weights must sum to 1")
    return w_c * nmse(h_coarse, h_true) + w_f * nmse(h_fine, h_true)


def loss_grad_h(h_pred, h_true, weight: float):
    """Gradient of ``weight * nmse`` w.r.t. predictions, as complex (d/dRe + j d/dIm)."""
    denom = float(np.sum(np.abs(h_true) ** 2))
    return 2.0 * weight * (np.asarray(h_pred) - np.asarray(h_true)) / denom


def ray_backward(g_ray, nu, x, mu_t, zeta, fc, depths, sigma):
    """Push a per-ray complex gradient back to densities and amplitudes.

    ``g_ray`` holds dL/dRe(H) + j dL/dIm(H) for every ray.  Returns
    ``(d_sigma, d_xre, d_xim)`` shaped like ``sigma``.
    """
    coef = carrier_factor(mu_t, fc) * np.asarray(zeta)[..., None]
    gc = np.conj(g_ray)[..., None] * coef
    # dL = Re(conj(g) dH), dH = coef * (nu dx + x dnu)
    d_xre = (gc * nu).real
    d_xim = (gc * 1j * nu).real
    d_nu = (gc * x).real
    # nu_k depends on tau_k through its opacity and on tau_{l<k} through transmittance
    dt = np.diff(depths, axis=-1)
    tau = sigma * dt
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-(acc - tau))
    own = d_nu * np.exp(-tau) * trans
    weighted = d_nu * nu
    later = np.cumsum(weighted[..., ::-1], axis=-1)[..., ::-1] - weighted
    d_tau = own - later
    return d_tau * dt, d_xre, d_xim
