"""Electromagnetic material properties and Fresnel interface coefficients.

Material parameters follow the ITU-R P.2040 power-law form::

    eps_r(f) = a * f_GHz ** b
    sigma(f) = c * f_GHz ** d      [S/m]

and are shipped as a plain CSV table (``data/materials.csv``) so they can be
audited or swapped for calibrated values.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

EPS0 = 8.854e-12  # F/m
C0 = 2.998e8  # m/s


class MaterialClass(str, enum.Enum):
    CONCRETE = "concrete"
    WOOD = "wood"
    METAL = "metal"
    GLASS = "glass"
    PLYWOOD = "plywood"
    AIR = "air"

    @classmethod
    def parse(cls, name: str) -> "MaterialClass":
        key = name.strip().lower()
        for prefix in ("mat-", "itu_"):
            if key.startswith(prefix):
                key = key[len(prefix):]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown material class {name!r}") from None


class FrequencyRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MaterialRecord:
    material: MaterialClass
    eps_r_coeffs: tuple[float, float]
    sigma_coeffs: tuple[float, float]
    valid_freq_range: tuple[float, float]  # GHz
    default_thickness: float  # m

    def properties(self, f_ghz: float) -> tuple[float, float]:
        """(eps_r, sigma) at ``f_ghz`` without range checks."""
        if self.material is MaterialClass.AIR:
            return 1.0, 0.0
        a, b = self.eps_r_coeffs
        c, d = self.sigma_coeffs
        return a * f_ghz**b, c * f_ghz**d


@dataclass(frozen=True)
class ComplexPermittivity:
    """Complex relative permittivity ``eps_r - j sigma / (eps0 omega)``.

    ``clamped`` is set when the requested frequency was outside the record's
    validated range and the nearest valid frequency was used instead.
    """

    eta: complex
    freq: float
    clamped: bool = False
    warning: str | None = None


@dataclass(frozen=True)
class FresnelCoeffs:
    r_perp: complex
    r_par: complex
    t_perp: complex
    t_par: complex


def load_material_table(path: str | Path | None = None) -> dict[MaterialClass, MaterialRecord]:
    """Read a material table; the bundled table is used when ``path`` is None."""
    if path is None:
        text = resources.files("sitewave.data").joinpath("materials.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    table: dict[MaterialClass, MaterialRecord] = {}
    for row in csv.DictReader(rows):
        cls = MaterialClass.parse(row["class"])
        if cls in table:
            raise ValueError(f"duplicate material row for {cls.value}")
        rec = MaterialRecord(
            material=cls,
            eps_r_coeffs=(float(row["a"]), float(row["b"])),
            sigma_coeffs=(float(row["c"]), float(row["d"])),
            valid_freq_range=(float(row["f_min_GHz"]), float(row["f_max_GHz"])),
            default_thickness=float(row["thickness_m"]),
        )
        if rec.default_thickness < 0:
            raise ValueError(f"negative thickness for {cls.value}")
        table[cls] = rec
    missing = set(MaterialClass) - set(table)
    if missing:
        raise ValueError(f"material table lacks {sorted(m.value for m in missing)}")
    return table


_DEFAULT_TABLE: dict[MaterialClass, MaterialRecord] | None = None


def default_table() -> Mapping[MaterialClass, MaterialRecord]:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = load_material_table()
    return _DEFAULT_TABLE


def eval_permittivity(record: MaterialRecord, freq: float) -> ComplexPermittivity:
    if not freq > 0:
        raise ValueError("frequency must be positive")
    f_ghz = freq / 1e9
    lo, hi = record.valid_freq_range
    clamped = False
    msg = None
    if f_ghz < lo or f_ghz > hi:
        f_used = min(max(f_ghz, lo), hi)
        msg = (
            f"{record.material.value}: {f_ghz:g} GHz outside validated range "
            f"[{lo:g}, {hi:g}] GHz, clamped to {f_used:g} GHz"
        )
        warnings.warn(msg, FrequencyRangeWarning, stacklevel=2)
        f_ghz, clamped = f_used, True
    eps_r, sigma = record.properties(f_ghz)
    # conductivity term uses the caller's frequency, only the table lookup is clamped
    omega = 2.0 * math.pi * freq
    return ComplexPermittivity(complex(eps_r, -sigma / (EPS0 * omega)), freq, clamped, msg)


def csqrt(z):
    """Principal complex square root, Re >= 0; on the branch cut Im <= 0."""
    z = np.asarray(z, dtype=complex)
    w = np.sqrt(z)
    cut = (w.real == 0) & (w.imag > 0)
    return np.where(cut, -w, w)


def fresnel_arrays(eta, theta):
    """Vectorised reflection coefficients ``(r_perp, r_par)`` for air -> material."""
    eta = np.asarray(eta, dtype=complex)
    theta = np.asarray(theta, dtype=float)
    c = np.cos(theta)
    s2 = np.sin(theta) ** 2
    q = csqrt(eta - s2)
    r_perp = (c - q) / (c + q)
    r_par = (eta * c - q) / (eta * c + q)
    return r_perp, r_par


def fresnel(eta: complex | ComplexPermittivity, theta_i: float) -> FresnelCoeffs:
    if isinstance(eta, ComplexPermittivity):
        eta = eta.eta
    if not 0.0 <= theta_i < math.pi / 2:
        raise ValueError(f"incidence angle {theta_i!r} rad outside [0, pi/2)")
    r_perp, r_par = fresnel_arrays(eta, theta_i)
    r_perp, r_par = complex(r_perp), complex(r_par)
    return FresnelCoeffs(r_perp, r_par, 1 + r_perp, 1 + r_par)


def reflected_power_fraction(coeffs: FresnelCoeffs, polarization: str) -> float:
    if polarization == "perp":
        return abs(coeffs.r_perp) ** 2
    if polarization == "par":
        return abs(coeffs.r_par) ** 2
    raise ValueError(f"polarization must be 'perp' or 'par', got {polarization!r}")


def slab_transmission(eta, theta, thickness: float, freq: float):
    """Amplitude transmission ``(T_perp, T_par)`` through a single slab.

    Entry uses ``t = 1 + r``, exit the reverse interface ``t' = 1 - r``, and
    the in-slab field propagates as ``exp(-j k0 q thickness)`` with
    ``q = sqrt(eta - sin^2 theta)``. Internal multiple reflections are ignored.
    """
    eta = np.asarray(eta, dtype=complex)
    theta = np.asarray(theta, dtype=float)
    r_perp, r_par = fresnel_arrays(eta, theta)
    k0 = 2.0 * math.pi * freq / C0
    q = csqrt(eta - np.sin(theta) ** 2)
    # excess phase relative to the same distance in air, so path delay stays geometric
    prop = np.exp(-1j * k0 * (q - np.cos(theta)) * thickness)
    return (1 - r_perp**2) * prop, (1 - r_par**2) * prop
