"""Three-state IQ readout: Gaussian discrimination, confusion matrices,
and inversion-based error mitigation.

Classification is equal-prior Gaussian maximum likelihood over the three
blob models, with ties broken toward the lower state index.  Mitigation
multiplies the inverse confusion matrix into observed population vectors,
clipping small negative components by default.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import dblquad
from scipy.optimize import brentq

from .dynamics import PopulationState, PopulationTrace
from .errors import InvalidParameterError, MitigationUnstableError

CONFUSION_SCHEMA_VERSION = 1

#: Condition-number ceiling above which mitigation refuses to invert.
MITIGATION_CONDITION_LIMIT = 1e6


@dataclass(frozen=True)
class IqBlobModel:
    """Gaussian readout blobs for states |0>, |1>, |2> in the IQ plane.

    ``means`` has shape (3, 2); ``covariances`` has shape (3, 2, 2) and every
    covariance must be symmetric positive definite.
    """

    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covariances, dtype=float)
        if means.shape != (3, 2):
            raise InvalidParameterError(f"means must have shape (3, 2), got {means.shape}")
        if covs.shape != (3, 2, 2):
            raise InvalidParameterError(
                f"covariances must have shape (3, 2, 2), got {covs.shape}"
            )
        for k in range(3):
            c = covs[k]
            if not np.allclose(c, c.T, rtol=0.0, atol=1e-12):
                raise InvalidParameterError(f"covariance of blob {k} is not symmetric")
            if np.any(np.linalg.eigvalsh(c) <= 0.0):
                raise InvalidParameterError(f"covariance of blob {k} is not positive definite")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)

    def to_json_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "IqBlobModel":
        return cls(np.array(doc["means"]), np.array(doc["covariances"]))


def equilateral_blobs(radius: float, sigma: float = 1.0) -> IqBlobModel:
    """Three isotropic blobs at the vertices of an equilateral triangle.

    ``radius`` is the distance of each mean from the origin; ``sigma`` the
    per-axis standard deviation.
    """
    if radius <= 0.0 or sigma <= 0.0:
        raise InvalidParameterError("radius and sigma must be positive")
    angles = np.deg2rad([90.0, 210.0, 330.0])
    means = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    covs = np.repeat((sigma**2 * np.eye(2))[None, :, :], 3, axis=0)
    return IqBlobModel(means, covs)


def equilateral_assignment_probability(radius: float, sigma: float = 1.0) -> float:
    """Exact per-state correct-assignment probability for equilateral blobs.

    Integrates one Gaussian over its 120-degree maximum-likelihood wedge in
    polar coordinates; by symmetry this equals the three-state assignment
    fidelity of the geometry.
    """

    def integrand(rho, theta):
        return (
            rho
            / (2.0 * math.pi * sigma**2)
            * math.exp(-(rho**2 - 2.0 * rho * radius * math.sin(theta) + radius**2)
                       / (2.0 * sigma**2))
        )

    val, _ = dblquad(
        integrand,
        math.pi / 6.0,
        5.0 * math.pi / 6.0,
        lambda _th: 0.0,
        lambda _th: radius + 12.0 * sigma,
        epsabs=1e-11,
        epsrel=1e-11,
    )
    return val


def calibrate_equilateral_radius(
    target_fidelity: float, sigma: float = 1.0, xtol: float = 1e-8
) -> float:
    """Blob-triangle radius whose exact assignment fidelity hits the target."""
    if not 1.0 / 3.0 < target_fidelity < 1.0:
        raise InvalidParameterError("target fidelity must lie in (1/3, 1)")
    return float(
        brentq(
            lambda r: equilateral_assignment_probability(r, sigma) - target_fidelity,
            1e-3 * sigma,
            12.0 * sigma,
            xtol=xtol,
        )
    )


def _log_likelihoods(blobs: IqBlobModel, points: np.ndarray) -> np.ndarray:
    out = np.empty((points.shape[0], 3))
    for k in range(3):
        cov = blobs.covariances[k]
        det = float(np.linalg.det(cov))
        if det <= 0.0 or not math.isfinite(det):
            raise InvalidParameterError(f"singular covariance for blob {k}")
        inv = np.linalg.inv(cov)
        d = points - blobs.means[k]
        quad = np.einsum("ni,ij,nj->n", d, inv, d)
        out[:, k] = -0.5 * quad - 0.5 * math.log(det)
    return out


def classify(blobs: IqBlobModel, point: Sequence[float]) -> int:
    """Maximum-likelihood state assignment for one IQ point (equal priors).

    Ties break toward the lower state index.
    """
    p = np.asarray(point, dtype=float).reshape(1, 2)
    return int(np.argmax(_log_likelihoods(blobs, p), axis=1)[0])


def classify_points(blobs: IqBlobModel, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`classify` over an (n, 2) array of points."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    return np.argmax(_log_likelihoods(blobs, points), axis=1)


def sample_blob(
    blobs: IqBlobModel, state: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``n`` IQ points from blob ``state`` using the supplied stream."""
    chol = np.linalg.cholesky(blobs.covariances[state])
    z = rng.standard_normal((n, 2))
    return blobs.means[state] + z @ chol.T


@dataclass(frozen=True)
class ConfusionMatrix:
    """Column-stochastic assignment matrix m[j, k] = P(assign j | prepared k)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.shape != (3, 3):
            raise InvalidParameterError(f"confusion matrix must be 3x3, got {m.shape}")
        if np.any(m < 0.0) or np.any(m > 1.0):
            raise InvalidParameterError("confusion matrix entries must lie in [0, 1]")
        if np.max(np.abs(m.sum(axis=0) - 1.0)) > 1e-12:
            raise InvalidParameterError("confusion matrix columns must sum to 1")
        object.__setattr__(self, "m", m)

    @property
    def fidelity(self) -> float:
        return float(np.mean(np.diag(self.m)))

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.m))

    def apply(self, state: PopulationState) -> PopulationState:
        """Forward-corrupt an ideal population vector: p_expt = M p_ideal."""
        return PopulationState.from_vector(self.m @ state.vector())

    def to_json_dict(self) -> dict:
        return {
            "schema_version": CONFUSION_SCHEMA_VERSION,
            "matrix_row_major": [float(v) for v in self.m.reshape(-1)],
            "assignment_fidelity": self.fidelity,
            "condition_number": self.condition_number,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ConfusionMatrix":
        if doc.get("schema_version") != CONFUSION_SCHEMA_VERSION:
            raise InvalidParameterError(
                f"unsupported confusion schema_version {doc.get('schema_version')!r}"
            )
        return cls(np.array(doc["matrix_row_major"], dtype=float).reshape(3, 3))

    @classmethod
    def from_json(cls, path) -> "ConfusionMatrix":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


IDENTITY_CONFUSION = ConfusionMatrix(np.eye(3))


def simulate_confusion_matrix(
    blobs: IqBlobModel, shots_per_state: int, seed
) -> ConfusionMatrix:
    """Empirical confusion matrix from seeded blob sampling.

    Prepares each basis state ``shots_per_state`` times, pushes every shot
    through the ML classifier, and column-normalizes the assignment counts.
    Deterministic for a fixed seed.
    """
    if shots_per_state < 1:
        raise InvalidParameterError("shots_per_state must be >= 1")
    rng = np.random.default_rng(seed)
    m = np.zeros((3, 3))
    for k in range(3):
        assigned = classify_points(blobs, sample_blob(blobs, k, shots_per_state, rng))
        counts = np.bincount(assigned, minlength=3)
        m[:, k] = counts / float(shots_per_state)
    return ConfusionMatrix(m)


def assignment_fidelity(m: ConfusionMatrix) -> float:
    """Mean of the diagonal assignment probabilities."""
    return m.fidelity


def mitigate(
    m: ConfusionMatrix, observed: PopulationState, clip: bool = True
) -> PopulationState:
    """Recover ideal populations by applying the inverse confusion matrix.

    With ``clip`` (default) negative components of the raw inverse are set
    to zero and the vector renormalized to unit sum; with ``clip=False`` the
    raw inverse is returned even if slightly unphysical.
    """
    cond = m.condition_number
    if not math.isfinite(cond) or cond >= MITIGATION_CONDITION_LIMIT:
        raise MitigationUnstableError(cond)
    p = np.linalg.solve(m.m, observed.vector())
    if clip and np.any(p < 0.0):
        p = np.clip(p, 0.0, None)
        s = p.sum()
        if s == 0.0:
            raise InvalidParameterError("mitigated vector clipped to zero; input invalid")
        p = p / s
    return PopulationState.from_vector(p)


def mitigate_trace(m: ConfusionMatrix, trace: PopulationTrace, clip: bool = True) -> PopulationTrace:
    """Apply :func:`mitigate` to every delay point of a trace."""
    corrected = np.empty_like(trace.populations)
    for i in range(len(trace)):
        corrected[i] = mitigate(m, trace.state(i), clip=clip).vector()
    return PopulationTrace(trace.delays.copy(), corrected, None if trace.shots is None else trace.shots.copy())


@dataclass(frozen=True)
class ShotRecord:
    """One classified readout shot at a given delay."""

    delay_us: float
    assigned_state: int
    repetition: int

    def __post_init__(self):
        if self.assigned_state not in (0, 1, 2):
            raise InvalidParameterError(f"assigned_state must be 0, 1 or 2, got {self.assigned_state!r}")


def shot_records_to_csv(records: Sequence[ShotRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delay_us", "state", "rep"])
        for r in records:
            w.writerow([repr(float(r.delay_us)), r.assigned_state, r.repetition])


def shot_records_from_csv(path) -> list[ShotRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ShotRecord(float(row["delay_us"]), int(row["state"]), int(row["rep"])))
    return out
