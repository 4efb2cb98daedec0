"""Lorentzian TLS noise model and the multi-defect transition-rate forward model.

Unit convention: every frequency at the interface is a cycle frequency in
MHz.  ``lorentzian_density`` then has units 1/MHz, and a defect's coupling
weight carries MHz/us so that rates come out in 1/us with a conversion
constant of exactly 1.  Any consistent 2*pi (angular-frequency) factor is
absorbed into the coupling weight.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import ZERO_RATES, DecayRates
from .errors import InvalidParameterError

TLS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DeviceFrequencies:
    """Transmon transition frequencies in MHz.

    ``omega_01`` is the |0>-|1> transition; the anharmonicity is negative
    and fixes ``omega_12 = omega_01 + anharmonicity``.
    """

    omega_01: float
    anharmonicity: float

    def __post_init__(self):
        if not (math.isfinite(self.omega_01) and self.omega_01 > 0.0):
            raise InvalidParameterError(f"omega_01 must be positive, got {self.omega_01!r}")
        if not (math.isfinite(self.anharmonicity) and self.anharmonicity < 0.0):
            raise InvalidParameterError(
                f"anharmonicity must be negative, got {self.anharmonicity!r}"
            )
        if self.omega_12 <= 0.0:
            raise InvalidParameterError("omega_12 = omega_01 + anharmonicity must be positive")

    @property
    def omega_12(self) -> float:
        return self.omega_01 + self.anharmonicity


@dataclass(frozen=True)
class TlsDefect:
    """One two-level-system defect.

    ``coupling_weight`` (MHz/us) sets the on-resonance rate B/gamma;
    ``linewidth_mhz`` is the Lorentzian half-width; ``trajectory_mhz`` gives
    the defect's center frequency at each observation epoch.
    """

    coupling_weight: float
    linewidth_mhz: float
    trajectory_mhz: np.ndarray

    def __post_init__(self):
        if not (math.isfinite(self.coupling_weight) and self.coupling_weight > 0.0):
            raise InvalidParameterError("coupling_weight must be positive")
        if not (math.isfinite(self.linewidth_mhz) and self.linewidth_mhz > 0.0):
            raise InvalidParameterError("linewidth_mhz must be positive")
        object.__setattr__(
            self, "trajectory_mhz", np.atleast_1d(np.asarray(self.trajectory_mhz, dtype=float))
        )
        if not np.all(np.isfinite(self.trajectory_mhz)):
            raise InvalidParameterError("trajectory_mhz must be finite")

    @property
    def n_epochs(self) -> int:
        return int(self.trajectory_mhz.size)


@dataclass
class TlsParameterSet:
    """A collection of defects plus a constant background-rate floor."""

    defects: list[TlsDefect]
    background: DecayRates = field(default_factory=lambda: ZERO_RATES)

    def __post_init__(self):
        lengths = {d.n_epochs for d in self.defects}
        if len(lengths) > 1:
            raise InvalidParameterError(
                f"all defect trajectories must cover the same epochs, got lengths {sorted(lengths)}"
            )

    @property
    def n_epochs(self) -> int:
        return self.defects[0].n_epochs if self.defects else 0

    def __len__(self) -> int:
        return len(self.defects)

    # -- serialization ----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "schema_version": TLS_SCHEMA_VERSION,
            "tls": [
                {
                    "B": d.coupling_weight,
                    "gamma_mhz": d.linewidth_mhz,
                    "omega_mhz": [float(w) for w in d.trajectory_mhz],
                }
                for d in self.defects
            ],
            "background": {
                "gamma10": self.background.gamma_10,
                "gamma21": self.background.gamma_21,
            },
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TlsParameterSet":
        if doc.get("schema_version") != TLS_SCHEMA_VERSION:
            raise InvalidParameterError(
                f"unsupported TLS schema_version {doc.get('schema_version')!r}"
            )
        defects = [
            TlsDefect(entry["B"], entry["gamma_mhz"], np.array(entry["omega_mhz"]))
            for entry in doc["tls"]
        ]
        bg = doc.get("background", {})
        background = DecayRates(bg.get("gamma10", 0.0), bg.get("gamma21", 0.0))
        return cls(defects, background)

    @classmethod
    def from_json(cls, path) -> "TlsParameterSet":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def lorentzian_density(center_mhz, linewidth_mhz, probe_mhz):
    """Lorentzian shape gamma / ((probe - center)^2 + gamma^2), units 1/MHz.

    Vectorized over any of the arguments; symmetric in probe <-> center.
    """
    linewidth = np.asarray(linewidth_mhz, dtype=float)
    if np.any(linewidth <= 0.0) or not np.all(np.isfinite(linewidth)):
        raise InvalidParameterError(f"linewidth must be positive, got {linewidth_mhz!r}")
    detuning = np.asarray(probe_mhz, dtype=float) - np.asarray(center_mhz, dtype=float)
    out = linewidth / (detuning**2 + linewidth**2)
    return float(out) if out.ndim == 0 else out


def transition_rates(
    tls: TlsParameterSet,
    device: DeviceFrequencies,
    epoch: int,
    f_multiplier: float = 1.0,
) -> DecayRates:
    """Decay rates from the additive multi-defect Lorentzian model.

    gamma_10 sums each defect's spectral density at omega_01, gamma_21 at
    omega_12, each scaled by the defect's coupling weight.  ``f_multiplier``
    optionally scales every defect's contribution to the |2> -> |1> channel
    (2.0 models the larger matrix element of the upper transition; the
    default 1.0 uses a single shared weight per defect).
    """
    if not tls.defects:
        raise InvalidParameterError(
            "transition_rates requires at least one defect; "
            "use rates_with_background for a pure background floor"
        )
    if not 0 <= epoch < tls.n_epochs:
        raise InvalidParameterError(f"epoch {epoch} outside trajectory range 0..{tls.n_epochs - 1}")
    g10 = 0.0
    g21 = 0.0
    for d in tls.defects:
        w = float(d.trajectory_mhz[epoch])
        g10 += d.coupling_weight * lorentzian_density(w, d.linewidth_mhz, device.omega_01)
        g21 += f_multiplier * d.coupling_weight * lorentzian_density(
            w, d.linewidth_mhz, device.omega_12
        )
    return DecayRates(g10, g21)


def rates_with_background(
    tls: TlsParameterSet,
    device: DeviceFrequencies,
    background: Optional[DecayRates] = None,
    epoch: int = 0,
    f_multiplier: float = 1.0,
) -> DecayRates:
    """Componentwise sum of the defect rates and a constant background floor.

    ``background=None`` uses the floor stored on ``tls``.  An empty defect
    set is allowed here (the floor alone must then be positive for any
    downstream dynamics).
    """
    bg = tls.background if background is None else background
    if not tls.defects:
        return bg
    r = transition_rates(tls, device, epoch, f_multiplier)
    return DecayRates(r.gamma_10 + bg.gamma_10, r.gamma_21 + bg.gamma_21)


def rate_series(
    tls: TlsParameterSet,
    device: DeviceFrequencies,
    background: Optional[DecayRates] = None,
    f_multiplier: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-epoch (gamma_10, gamma_21) arrays over all epochs."""
    bg = tls.background if background is None else background
    n = tls.n_epochs
    g10 = np.full(n, bg.gamma_10)
    g21 = np.full(n, bg.gamma_21)
    for d in tls.defects:
        g10 = g10 + d.coupling_weight * lorentzian_density(
            d.trajectory_mhz, d.linewidth_mhz, device.omega_01
        )
        g21 = g21 + f_multiplier * d.coupling_weight * lorentzian_density(
            d.trajectory_mhz, d.linewidth_mhz, device.omega_12
        )
    return g10, g21
