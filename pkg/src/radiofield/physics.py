"""Electromagnetic primitives for specular indoor propagation.

Impedances, Snell refraction with complex indices, Fresnel reflection
coefficients, the per-bounce amplitude factor and the path-level interaction
attenuation, plus free-space loss and carrier phase.

Time convention is ``exp(+j*omega*t)``; a wave travelling along +z carries
``exp(-j*k*z)``, so lossy media have refractive indices with negative
imaginary part.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.constants import epsilon_0, mu_0, speed_of_light

C0 = speed_of_light
ETA0 = float(np.sqrt(mu_0 / epsilon_0))

REFLECTION = "reflection"
INTERACTION_KINDS = (REFLECTION, "transmission", "scattering", "diffraction")


@dataclass(frozen=True)
class Material:
    """Uniform, isotropic, non-magnetic medium."""

    name: str
    eps_r: float
    sigma: float = 0.0
    mu_r: float = 1.0

    def __post_init__(self):
        if self.mu_r != 1.0:
            raise ValueError(f"{self.name}: only non-magnetic media supported (mu_r=1), got {self.mu_r}")
        if self.eps_r < 1.0:
            raise ValueError(f"{self.name}: eps_r must be >= 1, got {self.eps_r}")
        if self.sigma < 0.0:
            raise ValueError(f"{self.name}: sigma must be >= 0, got {self.sigma}")

    def to_dict(self) -> dict:
        return {"name": self.name, "eps_r": self.eps_r, "sigma": self.sigma, "mu_r": self.mu_r}


AIR = Material("air", 1.0, 0.0)

# ITU-R P.2040 style fits: eps_r = a * f**b, sigma = c * f**d with f in GHz.
ITU_MATERIALS = {
    "gypsum": (2.94, 0.0, 0.0116, 0.7076),
    "concrete": (5.31, 0.0, 0.0326, 0.8095),
    "brick": (3.75, 0.0, 0.038, 0.0),
    "wood": (1.99, 0.0, 0.0047, 1.0718),
    "glass": (6.27, 0.0, 0.0043, 1.1925),
}


def itu_material(name: str, frequency: float) -> Material:
    """Material constants at ``frequency`` (Hz) from the built-in table."""
    try:
        a, b, c, d = ITU_MATERIALS[name]
    except KeyError:
        raise KeyError(f"unknown material {name!r}; known: {sorted(ITU_MATERIALS)}") from None
    f_ghz = frequency / 1e9
    return Material(name, a * f_ghz**b, c * f_ghz**d)


def load_materials(path: str | Path) -> dict[str, Material]:
    """Read a material table from YAML or JSON.

    The file holds a list of mappings with keys ``name``, ``eps_r``,
    ``sigma`` and optionally ``mu_r``, either at top level or under a
    ``materials`` key.
    """
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        raw = json.loads(text)
    else:
        import yaml

        raw = yaml.safe_load(text)
    if isinstance(raw, dict):
        raw = raw.get("materials", raw)
    table = {}
    for entry in raw:
        unknown = set(entry) - {"name", "eps_r", "sigma", "mu_r"}
        if unknown:
            raise ValueError(f"unknown material keys: {sorted(unknown)}")
        mat = Material(
            str(entry["name"]),
            float(entry["eps_r"]),
            float(entry.get("sigma", 0.0)),
            float(entry.get("mu_r", 1.0)),
        )
        table[mat.name] = mat
    return table


@dataclass(frozen=True)
class PolarizationWeights:
    w_perp: float = 0.5
    w_par: float = 0.5

    def __post_init__(self):
        if self.w_perp < 0 or self.w_par < 0 or not np.isclose(self.w_perp + self.w_par, 1.0, atol=1e-12):
            raise ValueError(f"polarization weights must be non-negative and sum to 1: {self}")


@dataclass(frozen=True)
class ReflectionEvent:
    theta_i: float
    material_in: Material
    material_out: Material
    frequency: float

    def __post_init__(self):
        if not 0.0 <= self.theta_i < np.pi / 2:
            raise ValueError(f"incidence angle must lie in [0, pi/2), got {self.theta_i}")


@dataclass(frozen=True)
class Interaction:
    """One interface interaction along a path; only reflections carry physics."""

    kind: str
    event: ReflectionEvent | None = None

    def __post_init__(self):
        if self.kind not in INTERACTION_KINDS:
            raise ValueError(f"unknown interaction kind {self.kind!r}")
        if self.kind == REFLECTION and self.event is None:
            raise ValueError("reflection interactions need a ReflectionEvent")


def _angular(frequency):
    frequency = np.asarray(frequency, dtype=float)
    if np.any(frequency <= 0):
        raise ValueError("frequency must be positive")
    return 2.0 * np.pi * frequency


def intrinsic_impedance(material: Material, frequency):
    """Complex wave impedance sqrt(j*w*mu / (sigma + j*w*eps)) in ohms."""
    omega = _angular(frequency)
    mu = mu_0 * material.mu_r
    eps = epsilon_0 * material.eps_r
    return np.sqrt(1j * omega * mu / (material.sigma + 1j * omega * eps))


def refractive_index(material: Material, frequency):
    omega = _angular(frequency)
    return np.sqrt(material.eps_r * material.mu_r - 1j * material.sigma / (omega * epsilon_0))


def _cos_transmission(theta_i, n_in, n_out):
    """cos(theta_t) with the branch whose transmitted wave decays.

    Decay into the far medium means Im(n_out * cos(theta_t)) <= 0.
    """
    sin_i = np.sin(theta_i)
    kz = np.sqrt(n_out**2 - (n_in * sin_i) ** 2 + 0j)
    kz = np.where(kz.imag > 0, -kz, kz)
    # identical media: skip the square-root round trip so matched interfaces give exactly zero
    return np.where(n_in == n_out, np.cos(theta_i) + 0j, kz / n_out)


def transmission_angle(theta_i, mat_incident: Material, mat_other: Material, frequency):
    """Complex refraction angle from Snell's law n1 sin(ti) = n2 sin(tt)."""
    theta_i = np.asarray(theta_i, dtype=float)
    n_in = refractive_index(mat_incident, frequency)
    n_out = refractive_index(mat_other, frequency)
    sin_t = n_in * np.sin(theta_i) / n_out
    cos_t = _cos_transmission(theta_i, n_in, n_out)
    # exp(j*theta) = cos + j*sin pins both cosine and sine of the branch
    theta_t = -1j * np.log(cos_t + 1j * sin_t)
    if np.all(np.abs(theta_t.imag) < 1e-15):
        return theta_t.real
    return theta_t


def fresnel_coefficients_array(theta_i, material_in: Material, material_out: Material, frequency):
    """Vectorised (r_perp, r_par) over an array of incidence angles.

    ``eta_far`` is the impedance of the medium beyond the interface and
    ``eta_inc`` that of the medium the wave arrives from:

        r_perp = (eta_far cos ti - eta_inc cos tt) / (eta_far cos ti + eta_inc cos tt)
        r_par  = (eta_inc cos ti - eta_far cos tt) / (eta_inc cos ti + eta_far cos tt)
    """
    theta_i = np.asarray(theta_i, dtype=float)
    eta_inc = intrinsic_impedance(material_in, frequency)
    eta_far = intrinsic_impedance(material_out, frequency)
    cos_i = np.cos(theta_i)
    cos_t = _cos_transmission(theta_i, refractive_index(material_in, frequency), refractive_index(material_out, frequency))
    den_perp = eta_far * cos_i + eta_inc * cos_t
    den_par = eta_inc * cos_i + eta_far * cos_t
    if np.any(np.abs(den_perp) == 0) or np.any(np.abs(den_par) == 0):
        raise ZeroDivisionError("degenerate Fresnel denominator (both impedances vanish)")
    r_perp = (eta_far * cos_i - eta_inc * cos_t) / den_perp
    r_par = (eta_inc * cos_i - eta_far * cos_t) / den_par
    return r_perp, r_par


def fresnel_coefficients(event: ReflectionEvent) -> tuple[complex, complex]:
    r_perp, r_par = fresnel_coefficients_array(event.theta_i, event.material_in, event.material_out, event.frequency)
    return complex(r_perp), complex(r_par)


def reflection_amplitude(r_perp, r_par, weights: PolarizationWeights = PolarizationWeights()):
    """Polarisation-averaged amplitude factor sqrt(w_perp|r_perp|^2 + w_par|r_par|^2)."""
    power = weights.w_perp * np.abs(r_perp) ** 2 + weights.w_par * np.abs(r_par) ** 2
    return np.sqrt(power)


def path_zeta(events: Iterable[Interaction], weights: PolarizationWeights = PolarizationWeights()) -> float:
    """Interaction attenuation of a path.

    Zero as soon as any non-reflection interaction is present, else the
    product of the reflection amplitude factors (1 for line of sight).
    """
    zeta = 1.0
    for inter in events:
        if inter.kind != REFLECTION:
            return 0.0
        zeta *= float(reflection_amplitude(*fresnel_coefficients(inter.event), weights))
    return zeta


def reflection_zeta(cos_incidence: Sequence[float], materials: Sequence[Material], frequency: float,
                    weights: PolarizationWeights = PolarizationWeights(), incident: Material = AIR) -> float:
    """Shortcut for a pure-reflection path given per-bounce incidence cosines."""
    events = [
        Interaction(REFLECTION, ReflectionEvent(float(np.arccos(np.clip(c, 0.0, 1.0))), incident, m, frequency))
        for c, m in zip(cos_incidence, materials)
    ]
    return path_zeta(events, weights)


def free_space_amplitude(d, fc):
    """Friis amplitude factor c / (4 pi d fc)."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    if np.any(np.asarray(fc) <= 0):
        raise ValueError("carrier frequency must be positive")
    out = C0 / (4.0 * np.pi * d * fc)
    return float(out) if out.ndim == 0 else out


def path_phasor(d, fc):
    """Unit phasor exp(-j 2 pi fc d / c)."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    out = np.exp(-2j * np.pi * fc * d / C0)
    return complex(out) if out.ndim == 0 else out
