"""End-to-end synthetic experiments: drifting defects -> per-epoch rates ->
shot-sampled, readout-corrupted population traces.

Everything is deterministic for a fixed master seed.  Sub-streams are
derived per consumer (one per defect trajectory, one for the confusion
calibration, one per epoch), so changing one defect's seed or running
epochs in parallel never perturbs the other draws.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dynamics import DecayRates, PopulationTrace, closed_form_populations
from .errors import InvalidParameterError, ScenarioSchemaError
from .readout import ConfusionMatrix, IDENTITY_CONFUSION, IqBlobModel, classify_points, \
    equilateral_blobs, sample_blob, simulate_confusion_matrix
from .tls import DeviceFrequencies, TlsDefect, TlsParameterSet, rate_series
from .tracker import LifetimeSeries

SCENARIO_SCHEMA_VERSION = 1

# fixed stream tags for sub-seed derivation
_STREAM_TLS = 101
_STREAM_CONFUSION = 202
_STREAM_EPOCH = 303

DRIFT_KINDS = ("static", "random_walk", "ornstein_uhlenbeck")


def derive_rng(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent deterministic stream for (master seed, key...)."""
    return np.random.default_rng([int(master_seed), *[int(k) for k in keys]])


@dataclass(frozen=True)
class DriftProcess:
    """Seeded frequency-drift process for one defect.

    ``sigma_mhz`` is the per-step kick for a random walk and the continuous
    diffusion strength (MHz per sqrt hour) for the Ornstein-Uhlenbeck kind,
    whose stationary variance is sigma^2 / (2 theta).  ``theta_per_hr`` is
    the OU mean-reversion rate and is ignored by the other kinds.
    """

    kind: str
    start_mhz: float
    sigma_mhz: float = 0.0
    theta_per_hr: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise InvalidParameterError(f"unknown drift kind {self.kind!r}")
        if not math.isfinite(self.start_mhz):
            raise InvalidParameterError("start_mhz must be finite")
        if self.sigma_mhz < 0.0:
            raise InvalidParameterError("sigma_mhz must be >= 0")
        if self.theta_per_hr < 0.0:
            raise InvalidParameterError("theta_per_hr must be >= 0")

    def realize(self, n_epochs: int, dt_hr: float, rng: np.random.Generator) -> np.ndarray:
        if n_epochs < 1:
            raise InvalidParameterError("n_epochs must be >= 1")
        w = np.full(n_epochs, self.start_mhz)
        if self.kind == "static" or self.sigma_mhz == 0.0 or n_epochs == 1:
            return w
        if self.kind == "random_walk":
            steps = rng.normal(0.0, self.sigma_mhz, n_epochs - 1)
            w[1:] += np.cumsum(steps)
            return w
        # Ornstein-Uhlenbeck, exact discretization around the start value
        theta = self.theta_per_hr
        if theta == 0.0:
            steps = rng.normal(0.0, self.sigma_mhz * math.sqrt(dt_hr), n_epochs - 1)
            w[1:] += np.cumsum(steps)
            return w
        decay = math.exp(-theta * dt_hr)
        step_sd = math.sqrt(self.sigma_mhz**2 / (2.0 * theta) * (1.0 - decay**2))
        x = self.start_mhz
        for i in range(1, n_epochs):
            x = self.start_mhz + (x - self.start_mhz) * decay + rng.normal(0.0, step_sd)
            w[i] = x
        return w

    def to_json_dict(self) -> dict:
        doc = {"kind": self.kind, "start_mhz": self.start_mhz,
               "sigma_mhz": self.sigma_mhz, "seed": self.seed}
        if self.kind == "ornstein_uhlenbeck":
            doc["theta_per_hr"] = self.theta_per_hr
        return doc


@dataclass(frozen=True)
class TlsTruth:
    """Ground-truth defect: drift process plus coupling weight and linewidth."""

    drift: DriftProcess
    coupling_weight: float
    linewidth_mhz: float

    def __post_init__(self):
        if self.coupling_weight <= 0.0 or self.linewidth_mhz <= 0.0:
            raise InvalidParameterError("coupling_weight and linewidth_mhz must be positive")


@dataclass
class Scenario:
    """Complete description of one synthetic long-run experiment."""

    name: str
    device: DeviceFrequencies
    tls_truth: list[TlsTruth]
    background: DecayRates
    epochs: int
    epoch_spacing_hr: float
    delays_us: np.ndarray
    shots_per_delay: int
    calibration_shots: int = 100_000
    blobs: Optional[IqBlobModel] = None
    exact_populations: bool = False
    master_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidParameterError("epochs must be >= 1")
        if self.epoch_spacing_hr <= 0.0:
            raise InvalidParameterError("epoch_spacing_hr must be positive")
        if self.shots_per_delay < 1:
            raise InvalidParameterError("shots_per_delay must be >= 1")
        if self.calibration_shots < 1:
            raise InvalidParameterError("calibration_shots must be >= 1")
        self.delays_us = np.asarray(self.delays_us, dtype=float)
        if self.delays_us.size < 1 or self.delays_us[0] < 0.0 or np.any(
            np.diff(self.delays_us) <= 0.0
        ):
            raise InvalidParameterError("delays must be >= 0 and strictly increasing")

    @property
    def epoch_times_hr(self) -> np.ndarray:
        return np.arange(self.epochs) * self.epoch_spacing_hr

    def confusion_matrix(self) -> ConfusionMatrix:
        if self.blobs is None:
            return IDENTITY_CONFUSION
        return simulate_confusion_matrix(
            self.blobs, self.calibration_shots, derive_rng(self.master_seed, _STREAM_CONFUSION)
        )


# -- scenario JSON ----------------------------------------------------------


def _need(doc: dict, key: str, path: str):
    if key not in doc:
        raise ScenarioSchemaError(f"{path}.{key}" if path else key, "missing required field")
    return doc[key]


def _number(doc: dict, key: str, path: str) -> float:
    v = _need(doc, key, path)
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(float(v)):
        raise ScenarioSchemaError(f"{path}.{key}" if path else key,
                                  f"expected a finite number, got {v!r}")
    return float(v)


def _integer(doc: dict, key: str, path: str) -> int:
    v = _need(doc, key, path)
    if not isinstance(v, int) or isinstance(v, bool):
        raise ScenarioSchemaError(f"{path}.{key}" if path else key,
                                  f"expected an integer, got {v!r}")
    return v


def _delays_from_doc(doc: dict, path: str) -> np.ndarray:
    kind = _need(doc, "kind", path)
    if kind == "explicit":
        values = _need(doc, "values_us", path)
        if not isinstance(values, list) or not values:
            raise ScenarioSchemaError(f"{path}.values_us", "expected a non-empty list")
        return np.asarray(values, dtype=float)
    if kind in ("log", "linear"):
        n = _integer(doc, "n", path)
        lo = _number(doc, "min_us", path)
        hi = _number(doc, "max_us", path)
        if n < 2 or hi <= lo or (kind == "log" and lo <= 0.0):
            raise ScenarioSchemaError(path, f"invalid delay grid (n={n}, min={lo}, max={hi})")
        return np.geomspace(lo, hi, n) if kind == "log" else np.linspace(lo, hi, n)
    raise ScenarioSchemaError(f"{path}.kind", f"unknown delay grid kind {kind!r}")


def _blobs_from_doc(doc, path: str) -> Optional[IqBlobModel]:
    if doc is None:
        return None
    kind = doc.get("kind", "explicit")
    try:
        if kind == "equilateral":
            return equilateral_blobs(_number(doc, "radius", path), _number(doc, "sigma", path))
        if kind == "explicit":
            return IqBlobModel(np.array(_need(doc, "means", path)),
                               np.array(_need(doc, "covariances", path)))
    except InvalidParameterError as err:
        raise ScenarioSchemaError(path, str(err)) from None
    raise ScenarioSchemaError(f"{path}.kind", f"unknown blob kind {kind!r}")


def scenario_from_json_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioSchemaError("", "scenario document must be a JSON object")
    version = _integer(doc, "schema_version", "")
    if version != SCENARIO_SCHEMA_VERSION:
        raise ScenarioSchemaError("schema_version", f"unsupported version {version}")
    dev_doc = _need(doc, "device", "")
    try:
        device = DeviceFrequencies(
            _number(dev_doc, "omega01_mhz", "device"),
            _number(dev_doc, "anharmonicity_mhz", "device"),
        )
    except InvalidParameterError as err:
        raise ScenarioSchemaError("device", str(err)) from None

    bg_doc = doc.get("background", {})
    try:
        background = DecayRates(bg_doc.get("gamma10", 0.0), bg_doc.get("gamma21", 0.0))
    except InvalidParameterError as err:
        raise ScenarioSchemaError("background", str(err)) from None

    tls_doc = _need(doc, "tls", "")
    if not isinstance(tls_doc, list):
        raise ScenarioSchemaError("tls", "expected a list of defects")
    truths = []
    for i, entry in enumerate(tls_doc):
        path = f"tls[{i}]"
        drift_doc = _need(entry, "drift", path)
        try:
            drift = DriftProcess(
                kind=_need(drift_doc, "kind", f"{path}.drift"),
                start_mhz=_number(drift_doc, "start_mhz", f"{path}.drift"),
                sigma_mhz=drift_doc.get("sigma_mhz", 0.0),
                theta_per_hr=drift_doc.get("theta_per_hr", 0.0),
                seed=drift_doc.get("seed", i),
            )
            truths.append(
                TlsTruth(drift, _number(entry, "coupling_weight", path),
                         _number(entry, "linewidth_mhz", path))
            )
        except InvalidParameterError as err:
            raise ScenarioSchemaError(path, str(err)) from None

    try:
        return Scenario(
            name=str(doc.get("name", "scenario")),
            device=device,
            tls_truth=truths,
            background=background,
            epochs=_integer(doc, "epochs", ""),
            epoch_spacing_hr=_number(doc, "epoch_spacing_hr", ""),
            delays_us=_delays_from_doc(_need(doc, "delays", ""), "delays"),
            shots_per_delay=_integer(doc, "shots_per_delay", ""),
            calibration_shots=doc.get("calibration_shots", 100_000),
            blobs=_blobs_from_doc(doc.get("blobs"), "blobs"),
            exact_populations=bool(doc.get("exact_populations", False)),
            master_seed=_integer(doc, "master_seed", ""),
        )
    except InvalidParameterError as err:
        raise ScenarioSchemaError("", str(err)) from None


def scenario_to_json_dict(s: Scenario) -> dict:
    return {
        "schema_version": SCENARIO_SCHEMA_VERSION,
        "name": s.name,
        "device": {
            "omega01_mhz": s.device.omega_01,
            "anharmonicity_mhz": s.device.anharmonicity,
        },
        "background": {"gamma10": s.background.gamma_10, "gamma21": s.background.gamma_21},
        "tls": [
            {
                "coupling_weight": t.coupling_weight,
                "linewidth_mhz": t.linewidth_mhz,
                "drift": t.drift.to_json_dict(),
            }
            for t in s.tls_truth
        ],
        "epochs": s.epochs,
        "epoch_spacing_hr": s.epoch_spacing_hr,
        "delays": {"kind": "explicit", "values_us": [float(t) for t in s.delays_us]},
        "shots_per_delay": s.shots_per_delay,
        "calibration_shots": s.calibration_shots,
        "blobs": None if s.blobs is None else s.blobs.to_json_dict(),
        "exact_populations": s.exact_populations,
        "master_seed": s.master_seed,
    }


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ScenarioSchemaError("", f"not valid JSON: {err}") from None
    return scenario_from_json_dict(doc)


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package (device_A, device_B)."""
    fname = name if name.endswith(".json") else f"{name}.json"
    ref = resources.files("tlstrack").joinpath("scenarios", fname)
    if not ref.is_file():
        raise InvalidParameterError(f"no bundled scenario named {name!r}")
    return Path(str(ref))


def bundled_scenario(name: str) -> Scenario:
    return load_scenario(bundled_scenario_path(name))


# -- generation -------------------------------------------------------------


def generate_trajectories(scenario: Scenario) -> TlsParameterSet:
    """Realize every defect's drift process on the epoch grid."""
    defects = []
    for truth in scenario.tls_truth:
        rng = derive_rng(scenario.master_seed, _STREAM_TLS, truth.drift.seed)
        w = truth.drift.realize(scenario.epochs, scenario.epoch_spacing_hr, rng)
        defects.append(TlsDefect(truth.coupling_weight, truth.linewidth_mhz, w))
    return TlsParameterSet(defects, scenario.background)


def true_rate_arrays(scenario: Scenario, truth: Optional[TlsParameterSet] = None):
    if truth is None:
        truth = generate_trajectories(scenario)
    if truth.defects:
        return rate_series(truth, scenario.device)
    n = scenario.epochs
    return (np.full(n, scenario.background.gamma_10),
            np.full(n, scenario.background.gamma_21))


def true_lifetime_series(scenario: Scenario, truth: Optional[TlsParameterSet] = None) -> LifetimeSeries:
    g10, g21 = true_rate_arrays(scenario, truth)
    return LifetimeSeries(scenario.epoch_times_hr, 1.0 / g10, 1.0 / g21)


def _sample_epoch_trace(
    delays: np.ndarray,
    rates: DecayRates,
    shots: int,
    blobs: Optional[IqBlobModel],
    exact: bool,
    rng: np.random.Generator,
) -> PopulationTrace:
    ideal = closed_form_populations(rates, delays).T
    if exact:
        return PopulationTrace(delays.copy(), ideal)
    observed = np.empty_like(ideal)
    for i in range(delays.size):
        p = np.clip(ideal[i], 0.0, None)
        p = p / p.sum()
        counts = rng.multinomial(shots, p)
        if blobs is None:
            assigned = counts
        else:
            assigned = np.zeros(3, dtype=int)
            for k in range(3):
                if counts[k] == 0:
                    continue
                states = classify_points(blobs, sample_blob(blobs, k, int(counts[k]), rng))
                assigned += np.bincount(states, minlength=3)
        observed[i] = assigned / float(shots)
    return PopulationTrace(delays.copy(), observed, np.full(delays.size, shots))


def synthesize_epoch(scenario: Scenario, epoch: int, rates: DecayRates) -> PopulationTrace:
    """One epoch's observed trace; the random stream depends only on
    (master seed, epoch), so epochs can be produced in any order."""
    rng = derive_rng(scenario.master_seed, _STREAM_EPOCH, epoch)
    return _sample_epoch_trace(
        scenario.delays_us, rates, scenario.shots_per_delay, scenario.blobs,
        scenario.exact_populations, rng,
    )


def _epoch_worker(args) -> tuple[int, PopulationTrace]:
    scenario, epoch, g10, g21 = args
    return epoch, synthesize_epoch(scenario, epoch, DecayRates(g10, g21))


def synthesize_experiment(
    scenario: Scenario, jobs: int = 1
) -> tuple[list[PopulationTrace], ConfusionMatrix, TlsParameterSet]:
    """Full synthetic run: per-epoch traces, the simulated confusion matrix,
    and the ground-truth defect parameters."""
    truth = generate_trajectories(scenario)
    g10, g21 = true_rate_arrays(scenario, truth)
    confusion = scenario.confusion_matrix()
    args = [(scenario, e, float(g10[e]), float(g21[e])) for e in range(scenario.epochs)]
    if jobs > 1 and scenario.epochs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_epoch_worker, args, chunksize=8))
        results.sort(key=lambda pair: pair[0])
        traces = [trace for _, trace in results]
    else:
        traces = [_epoch_worker(a)[1] for a in args]
    return traces, confusion, truth


def write_run_directory(scenario: Scenario, out_dir, jobs: int = 1) -> Path:
    """Materialize a run: traces/epoch_XXXX.csv, confusion.json, truth.json,
    scenario.json, and the ground-truth lifetime series as series.csv."""
    out = Path(out_dir)
    traces, confusion, truth = synthesize_experiment(scenario, jobs=jobs)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    with open(out / "scenario.json", "w") as fh:
        json.dump(scenario_to_json_dict(scenario), fh, indent=1)
    confusion.to_json(out / "confusion.json")
    truth.to_json(out / "truth.json")
    true_lifetime_series(scenario, truth).to_csv(out / "series.csv")
    for e, trace in enumerate(traces):
        trace.to_csv(out / "traces" / f"epoch_{e:04d}.csv")
    return out
