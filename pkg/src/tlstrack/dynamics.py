"""Three-level cascade decay: closed-form populations and RK4 integration.

The model is the rate-equation cascade |2> -> |1> -> |0> with decay rates
``gamma_21`` and ``gamma_10`` (units 1/us), optionally extended with upward
(heating) rates.  Times are microseconds throughout; rates are 1/us.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParameterError

#: Relative rate difference below which the degenerate-rate limit is used.
DEGENERATE_RATE_RTOL = 1e-9

TRACE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DecayRates:
    """Downward transition rates (1/us) for the three-level cascade.

    ``gamma_10`` is the |1> -> |0> rate, ``gamma_21`` the |2> -> |1> rate.
    Zero entries are permitted so the type can double as an additive
    background floor; the dynamics operations themselves require strictly
    positive rates and raise ``InvalidParameterError`` otherwise.
    """

    gamma_10: float
    gamma_21: float

    def __post_init__(self):
        for name in ("gamma_10", "gamma_21"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise InvalidParameterError(f"{name} must be finite and >= 0, got {v!r}")

    @property
    def t1e(self) -> float:
        """Lifetime of |1> in us."""
        return 1.0 / self.gamma_10

    @property
    def t1f(self) -> float:
        """Lifetime of |2> in us."""
        return 1.0 / self.gamma_21

    def require_positive(self) -> "DecayRates":
        if self.gamma_10 <= 0.0 or self.gamma_21 <= 0.0:
            raise InvalidParameterError(
                f"decay rates must be strictly positive, got ({self.gamma_10}, {self.gamma_21})"
            )
        return self


ZERO_RATES = DecayRates(0.0, 0.0)


@dataclass(frozen=True)
class HeatingRates:
    """Upward (heating) rates gamma_01: |0> -> |1>, gamma_12: |1> -> |2>, 1/us.

    Both default to zero, which recovers the pure-decay cascade.
    """

    gamma_01: float = 0.0
    gamma_12: float = 0.0

    def __post_init__(self):
        for name in ("gamma_01", "gamma_12"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0.0:
                raise InvalidParameterError(f"{name} must be finite and >= 0, got {v!r}")

    @property
    def is_zero(self) -> bool:
        return self.gamma_01 == 0.0 and self.gamma_12 == 0.0


NO_HEATING = HeatingRates()


@dataclass(frozen=True)
class PopulationState:
    """Occupation probabilities of |0>, |1>, |2>.

    Construction only checks finiteness: mitigation with clipping disabled
    may legitimately produce slightly unphysical vectors.  Use
    :meth:`require_normalized` where a proper probability vector is needed.
    """

    p0: float
    p1: float
    p2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.p0, self.p1, self.p2)):
            raise InvalidParameterError(f"population components must be finite: {self}")

    def vector(self) -> np.ndarray:
        return np.array([self.p0, self.p1, self.p2], dtype=float)

    def is_normalized(self, tol: float = 1e-9) -> bool:
        v = self.vector()
        return bool(np.all(v >= -tol) and np.all(v <= 1.0 + tol) and abs(v.sum() - 1.0) <= tol)

    def require_normalized(self, tol: float = 1e-9) -> "PopulationState":
        if not self.is_normalized(tol):
            raise InvalidParameterError(f"population state not normalized within {tol}: {self}")
        return self

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "PopulationState":
        if len(v) != 3:
            raise InvalidParameterError(f"population vector must have 3 entries, got {len(v)}")
        return cls(float(v[0]), float(v[1]), float(v[2]))


GROUND = PopulationState(1.0, 0.0, 0.0)
SECOND_EXCITED = PopulationState(0.0, 0.0, 1.0)


@dataclass
class PopulationTrace:
    """Populations of the three levels versus delay time.

    ``delays`` (us) must be strictly increasing with a non-negative first
    entry.  ``populations`` has shape (n, 3) with rows (p0, p1, p2).
    ``shots`` optionally gives the per-point shot count.
    """

    delays: np.ndarray
    populations: np.ndarray
    shots: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.delays = np.asarray(self.delays, dtype=float)
        self.populations = np.asarray(self.populations, dtype=float)
        if self.delays.ndim != 1:
            raise InvalidParameterError("delays must be a 1-D sequence")
        if self.populations.shape != (self.delays.size, 3):
            raise InvalidParameterError(
                f"populations shape {self.populations.shape} does not match "
                f"{self.delays.size} delays"
            )
        if self.delays.size and self.delays[0] < 0.0:
            raise InvalidParameterError("first delay must be >= 0")
        if np.any(np.diff(self.delays) <= 0.0):
            raise InvalidParameterError("delays must be strictly increasing")
        if self.shots is not None:
            self.shots = np.asarray(self.shots, dtype=int)
            if self.shots.shape != self.delays.shape:
                raise InvalidParameterError("shots must match delays in length")
            if np.any(self.shots < 1):
                raise InvalidParameterError("shot counts must be positive")

    def __len__(self) -> int:
        return int(self.delays.size)

    def state(self, i: int) -> PopulationState:
        return PopulationState.from_vector(self.populations[i])

    # -- serialization ----------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delay_us", "p0", "p1", "p2", "shots"])
            for i, t in enumerate(self.delays):
                row = [repr(float(t))] + [repr(float(v)) for v in self.populations[i]]
                row.append("" if self.shots is None else int(self.shots[i]))
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "PopulationTrace":
        delays, pops, shots = [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                delays.append(float(row["delay_us"]))
                pops.append([float(row["p0"]), float(row["p1"]), float(row["p2"])])
                s = row.get("shots", "")
                shots.append(int(s) if s not in ("", None) else None)
        shot_arr = None if any(s is None for s in shots) else np.array(shots)
        return cls(np.array(delays), np.array(pops), shot_arr)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "delay_us": [float(t) for t in self.delays],
            "p0": [float(v) for v in self.populations[:, 0]],
            "p1": [float(v) for v in self.populations[:, 1]],
            "p2": [float(v) for v in self.populations[:, 2]],
            "shots": None if self.shots is None else [int(s) for s in self.shots],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PopulationTrace":
        if doc.get("schema_version") != TRACE_SCHEMA_VERSION:
            raise InvalidParameterError(
                f"unsupported trace schema_version {doc.get('schema_version')!r}"
            )
        pops = np.column_stack([doc["p0"], doc["p1"], doc["p2"]])
        shots = doc.get("shots")
        return cls(np.array(doc["delay_us"], dtype=float), pops,
                   None if shots is None else np.array(shots))


# -- forward models -------------------------------------------------------


def closed_form_populations(rates: DecayRates, t) -> np.ndarray:
    """Analytic populations for initial state |2>, vectorized over ``t``.

    Returns an array of shape (3,) + shape(t) with rows (p0, p1, p2).  The
    P1 solution carries the gamma_21 prefactor required for the three
    components to stay normalized, and switches to the limit form
    gamma*t*exp(-gamma*t) when the two rates agree to within
    ``DEGENERATE_RATE_RTOL`` (relative), which avoids catastrophic
    cancellation in the difference of exponentials.
    """
    rates.require_positive()
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or not np.all(np.isfinite(t)):
        raise InvalidParameterError("delay times must be finite and >= 0")
    g10, g21 = rates.gamma_10, rates.gamma_21
    p2 = np.exp(-g21 * t)
    if abs(g21 - g10) / max(g21, g10) < DEGENERATE_RATE_RTOL:
        g = 0.5 * (g10 + g21)
        p1 = g * t * np.exp(-g * t)
    else:
        p1 = g21 * (np.exp(-g10 * t) - p2) / (g21 - g10)
    p0 = 1.0 - p1 - p2
    return np.stack([p0, p1, p2])


def populations_closed_form(rates: DecayRates, t: float) -> PopulationState:
    """Analytic solution of the cascade at a single delay, initial state |2>."""
    p = closed_form_populations(rates, float(t))
    return PopulationState(float(p[0]), float(p[1]), float(p[2]))


def closed_form_trace(rates: DecayRates, delays) -> PopulationTrace:
    """Closed-form populations evaluated on a delay grid."""
    delays = np.asarray(delays, dtype=float)
    p = closed_form_populations(rates, delays)
    return PopulationTrace(delays, p.T)


def rate_matrix(rates: DecayRates, heating: HeatingRates = NO_HEATING) -> np.ndarray:
    """Generator matrix A with dP/dt = A @ P, ordered (p0, p1, p2)."""
    g10, g21 = rates.gamma_10, rates.gamma_21
    g01, g12 = heating.gamma_01, heating.gamma_12
    return np.array(
        [
            [-g01, g10, 0.0],
            [g01, -g10 - g12, g21],
            [0.0, g12, -g21],
        ]
    )


def _rk4_step_matrix(a: np.ndarray, h: float) -> np.ndarray:
    # For the linear constant-coefficient system the classical RK4 update is
    # exactly P <- (I + hA + (hA)^2/2 + (hA)^3/6 + (hA)^4/24) P.
    ha = h * a
    m = np.eye(3) + ha
    term = ha
    for k in (2.0, 3.0, 4.0):
        term = term @ ha / k
        m = m + term
    return m


def _integrate_grid(a: np.ndarray, p0: np.ndarray, delays: np.ndarray, h: float) -> np.ndarray:
    out = np.empty((delays.size, 3))
    p = p0.copy()
    t_prev = 0.0
    for i, t in enumerate(delays):
        dt = t - t_prev
        if dt > 0.0:
            n = max(1, int(math.ceil(dt / h)))
            step = _rk4_step_matrix(a, dt / n)
            p = np.linalg.matrix_power(step, n) @ p
        out[i] = p
        t_prev = t
    return out


def integrate_rate_equations(
    rates: DecayRates,
    heating: HeatingRates = NO_HEATING,
    initial: PopulationState = SECOND_EXCITED,
    delays: Sequence[float] = (),
) -> PopulationTrace:
    """Fixed-step RK4 solution of the cascade, with optional heating terms.

    Integration starts from ``initial`` at t=0 and records the state at each
    entry of ``delays``.  The base step is min(T1e, T1f)/200; it is halved
    until a further halving changes no recorded component by more than
    1e-10, so the returned trace is step-size converged.
    """
    rates.require_positive()
    initial.require_normalized()
    delays = np.asarray(delays, dtype=float)
    if delays.size == 0:
        raise InvalidParameterError("at least one delay is required")
    if delays[0] < 0.0 or np.any(np.diff(delays) <= 0.0):
        raise InvalidParameterError("delays must be >= 0 and strictly increasing")

    a = rate_matrix(rates, heating)
    p0 = initial.vector()
    h = min(rates.t1e, rates.t1f) / 200.0
    coarse = _integrate_grid(a, p0, delays, h)
    for _ in range(40):
        fine = _integrate_grid(a, p0, delays, h / 2.0)
        if np.max(np.abs(fine - coarse)) <= 1e-10:
            coarse = fine
            break
        h /= 2.0
        coarse = fine
    return PopulationTrace(delays, coarse)


def steady_state(rates: DecayRates, heating: HeatingRates) -> PopulationState:
    """Stationary distribution of the rate matrix (requires heating > 0 for
    a non-trivial result; with zero heating the ground state is returned)."""
    rates.require_positive()
    a = rate_matrix(rates, heating)
    m = np.vstack([a[:2], np.ones(3)])
    p = np.linalg.solve(m, np.array([0.0, 0.0, 1.0]))
    return PopulationState.from_vector(p)


def bosonic_ratio(rates: DecayRates) -> float:
    """gamma_21 / (2 * gamma_10): equals 1 for ideal bosonic decay.

    Deviations from 1 quantify frequency-selective loss between the two
    transitions.
    """
    rates.require_positive()
    return rates.gamma_21 / (2.0 * rates.gamma_10)
