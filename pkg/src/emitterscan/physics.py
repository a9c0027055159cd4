"""Transition-label arithmetic and the strain response of color-center lines.

Conventions: every quantity is a linear frequency.  Means and absolute
transitions are THz; splittings are GHz; linewidths are MHz.  Angular
frequencies never appear in the API.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

GHZ_PER_THZ = 1000.0


def lifetime_limit_mhz(lifetime_ns: float = 1.7) -> float:
    """Fourier-limited FWHM (in MHz) of a transition with the given lifetime."""
    if lifetime_ns <= 0:
        raise ValueError("lifetime must be positive")
    return 1e3 / (2.0 * np.pi * lifetime_ns)


@dataclass(frozen=True)
class NVLabels:
    """Mean frequency and splitting of the two spin-conserving lines."""

    mean_thz: float
    splitting_ghz: float

    def __post_init__(self):
        if self.splitting_ghz < 0:
            raise ValueError("splitting must be non-negative")


@dataclass(frozen=True)
class SiVLabels:
    """Mean frequency and orbital splittings of the four-line multiplet."""

    mean_thz: float
    gs_split_ghz: float
    es_split_ghz: float

    def __post_init__(self):
        if self.gs_split_ghz < 0 or self.es_split_ghz < 0:
            raise ValueError("splittings must be non-negative")


@dataclass(frozen=True)
class StrainState:
    """Symmetric strain tensor components (dimensionless)."""

    e_xx: float = 0.0
    e_yy: float = 0.0
    e_zz: float = 0.0
    e_xy: float = 0.0
    e_yz: float = 0.0
    e_zx: float = 0.0

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not np.isfinite(val) or abs(val) > 1e-2:
                raise ValueError(f"strain component {name}={val} outside sane range")


@dataclass(frozen=True)
class SiVSusceptibilities:
    """Linear strain susceptibilities and zero-strain constants.

    Susceptibilities are GHz per unit strain; spin-orbit splittings are GHz;
    the unstrained line center is THz.  Ships with no defaults: values are
    material calibrations, loaded from a config file.
    """

    t_par_g: float
    t_par_e: float
    t_perp_g: float
    t_perp_e: float
    d_g: float
    d_e: float
    f_g: float
    f_e: float
    lambda_so_g_ghz: float
    lambda_so_e_ghz: float
    zpl0_thz: float

    def __post_init__(self):
        if self.lambda_so_g_ghz <= 0 or self.lambda_so_e_ghz <= 0:
            raise ValueError("spin-orbit splittings must be positive")

    @classmethod
    def from_json(cls, path) -> "SiVSusceptibilities":
        payload = json.loads(Path(path).read_text())
        fields = {k: v for k, v in payload.items() if not k.startswith("_")}
        return cls(**fields)

    def to_json(self, path) -> None:
        doc = {"_units": "susceptibilities GHz/strain, lambda_so GHz, zpl0 THz"}
        doc.update(asdict(self))
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def nv_labels(ex_thz: float, ey_thz: float) -> NVLabels:
    """Mean and absolute splitting of the two line positions."""
    return NVLabels(mean_thz=0.5 * (ex_thz + ey_thz),
                    splitting_ghz=abs(ey_thz - ex_thz) * GHZ_PER_THZ)


def nv_levels_from_labels(labels: NVLabels) -> tuple[float, float]:
    """Inverse of nv_labels: (upper, lower) line frequencies in THz."""
    half = 0.5 * labels.splitting_ghz / GHZ_PER_THZ
    return labels.mean_thz + half, labels.mean_thz - half


def siv_labels(a_thz: float, b_thz: float, c_thz: float, d_thz: float) -> SiVLabels:
    """Labels from the four line frequencies ordered highest (A) to lowest (D).

    Mean is the average of all four; the ground-state splitting is C - D and
    the excited-state splitting is B - D.
    """
    if not (a_thz >= b_thz >= c_thz >= d_thz):
        raise ValueError("transitions must be ordered A >= B >= C >= D")
    return SiVLabels(mean_thz=0.25 * (a_thz + b_thz + c_thz + d_thz),
                     gs_split_ghz=(c_thz - d_thz) * GHZ_PER_THZ,
                     es_split_ghz=(b_thz - d_thz) * GHZ_PER_THZ)


def siv_transitions_from_labels(labels: SiVLabels) -> tuple[float, float, float, float]:
    """Inverse of siv_labels: the four line frequencies (A, B, C, D) in THz."""
    if labels.gs_split_ghz > labels.es_split_ghz:
        raise ValueError("gs_split > es_split cannot produce ordered transitions")
    m = labels.mean_thz
    half_sum = 0.5 * (labels.es_split_ghz + labels.gs_split_ghz) / GHZ_PER_THZ
    half_diff = 0.5 * (labels.es_split_ghz - labels.gs_split_ghz) / GHZ_PER_THZ
    return m + half_sum, m + half_diff, m - half_diff, m - half_sum


def siv_strain_forward(strain: StrainState, susc: SiVSusceptibilities) -> SiVLabels:
    """Labels of a strained center from the diagonalized orbital-strain model.

    The mean shifts linearly with axial strain (e_zz, and the e_xx + e_yy
    trace part); each splitting grows with transverse strain in quadrature
    with its zero-strain spin-orbit value.  The e_yz term enters linearly,
    matching the dimensions of its e_zx partner.
    """
    shift_ghz = ((susc.t_par_e - susc.t_par_g) * strain.e_zz
                 + (susc.t_perp_e - susc.t_perp_g) * (strain.e_xx + strain.e_yy))

    def split(lam, d, f):
        a = d * (strain.e_xx - strain.e_yy) + f * strain.e_yz
        b = -2.0 * d * strain.e_xy + f * strain.e_zx
        return float(np.sqrt(lam**2 + 4.0 * a**2 + 4.0 * b**2))

    return SiVLabels(
        mean_thz=susc.zpl0_thz + shift_ghz / GHZ_PER_THZ,
        gs_split_ghz=split(susc.lambda_so_g_ghz, susc.d_g, susc.f_g),
        es_split_ghz=split(susc.lambda_so_e_ghz, susc.d_e, susc.f_e),
    )
