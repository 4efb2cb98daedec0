"""Inversion of lifetime time series into drifting TLS parameters.

Given per-epoch lifetimes of the first and second excited states, the
tracker fits a one- or two-defect Lorentzian rate model: global coupling
weights and linewidths (plus an optional constant background floor) shared
by all epochs, and a free defect frequency per epoch.

The solve alternates two moves until the misfit settles:

(i)  per-epoch frequency solves at fixed globals -- a coarse grid sweep of
     the search band plus local refinement, with near-equal minima
     tie-broken toward the previous epoch's frequency (continuity);
(ii) a bounded Levenberg-Marquardt update of the globals on the stacked
     two-channel residuals, performed jointly with the trajectory (the
     model's derivatives are supplied analytically).  Updating the globals
     with trajectories frozen is not convergent here: the linewidth and
     the trajectory amplitude feed back on each other and the pure
     two-block scheme collapses the linewidth toward zero.

Because the rate levels alone cannot localize a defect (any (B, gamma,
omega) triple matching the two median rates is statically equivalent), the
loop is started from a small deterministic set of level-matched positions
spread over the search band and the best probe is kept.

Residuals are relative rate misfits (1 - Gamma_model/Gamma_measured) so the
fast and slow channels contribute comparably.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import DecayRates, ZERO_RATES
from .errors import InvalidParameterError, UndefinedCorrelationError
from .optimize import FitOptions, LeastSquaresProblem, grid_refine_1d, levenberg_marquardt
from .tls import DeviceFrequencies, TlsDefect, TlsParameterSet

_TINY = 1e-300


@dataclass
class LifetimeSeries:
    """Per-epoch lifetimes (us) of |1> (t1e) and |2> (t1f) vs. time (hours)."""

    epochs_hr: np.ndarray
    t1e_us: np.ndarray
    t1f_us: np.ndarray
    err_e_us: Optional[np.ndarray] = None
    err_f_us: Optional[np.ndarray] = None

    def __post_init__(self):
        self.epochs_hr = np.asarray(self.epochs_hr, dtype=float)
        self.t1e_us = np.asarray(self.t1e_us, dtype=float)
        self.t1f_us = np.asarray(self.t1f_us, dtype=float)
        n = self.epochs_hr.size
        if self.t1e_us.shape != (n,) or self.t1f_us.shape != (n,):
            raise InvalidParameterError("epochs, t1e and t1f must have equal length")
        if n and np.any(np.diff(self.epochs_hr) <= 0.0):
            raise InvalidParameterError("epoch timestamps must be strictly increasing")
        if np.any(self.t1e_us <= 0.0) or np.any(self.t1f_us <= 0.0):
            raise InvalidParameterError("lifetimes must be positive")
        for name in ("err_e_us", "err_f_us"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != (n,) or np.any(v < 0.0):
                    raise InvalidParameterError(f"{name} must be non-negative, length {n}")
                setattr(self, name, v)

    @property
    def n_epochs(self) -> int:
        return int(self.epochs_hr.size)

    @property
    def has_errors(self) -> bool:
        return self.err_e_us is not None and self.err_f_us is not None

    def rates(self) -> tuple[np.ndarray, np.ndarray]:
        return 1.0 / self.t1e_us, 1.0 / self.t1f_us

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["timestamp_hr", "t1e_us", "t1f_us"]
            if self.has_errors:
                header += ["err_e", "err_f"]
            w.writerow(header)
            for i in range(self.n_epochs):
                row = [repr(float(self.epochs_hr[i])), repr(float(self.t1e_us[i])),
                       repr(float(self.t1f_us[i]))]
                if self.has_errors:
                    row += [repr(float(self.err_e_us[i])), repr(float(self.err_f_us[i]))]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "LifetimeSeries":
        cols = {k: [] for k in ("timestamp_hr", "t1e_us", "t1f_us", "err_e", "err_f")}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise InvalidParameterError(f"{path}: empty series file")
            for row in reader:
                for k in ("timestamp_hr", "t1e_us", "t1f_us"):
                    if row.get(k) in (None, ""):
                        raise InvalidParameterError(f"{path}: missing column {k}")
                    cols[k].append(float(row[k]))
                for k in ("err_e", "err_f"):
                    if row.get(k) not in (None, ""):
                        cols[k].append(float(row[k]))
        errs = {}
        for k in ("err_e", "err_f"):
            if len(cols[k]) == len(cols["timestamp_hr"]) and cols[k]:
                errs[k] = np.array(cols[k])
        return cls(
            np.array(cols["timestamp_hr"]),
            np.array(cols["t1e_us"]),
            np.array(cols["t1f_us"]),
            errs.get("err_e"),
            errs.get("err_f"),
        )


@dataclass
class TrackerConfig:
    """Knobs for the alternating-minimization tracker."""

    band_margin_mhz: float = 200.0   # search band extends this far past both transitions
    coarse_points: int = 257         # 1-D per-epoch grid size
    coarse_points_2d: int = 60       # per-axis grid size for the two-defect solve
    max_candidates: int = 4          # refined local minima kept per epoch
    refine_tol_mhz: float = 1e-4
    outer_iterations: int = 50
    probe_iterations: int = 2        # outer cycles spent on each start before selection
    joint_lm_iterations: int = 150   # LM budget for each globals+trajectory update
    misfit_rtol: float = 1e-8
    misfit_floor: float = 1e-7       # converged once the per-residual RMS drops below this
    use_reported_errors: bool = True # weight residuals by the series' standard errors
    noise_floor_factor: float = 1.15 # stop once chi reaches this multiple of sqrt(N)
    tie_rel: float = 0.05            # candidates within this relative misfit tie-break
    tie_abs: float = 1e-12
    probe_tie_abs: float = 1e-5      # start probes below this misfit gap count as tied
    drift_penalty: float = 0.0       # 1/MHz^2; pulls epochs toward previous-iterate neighbors
    fit_background: bool = True
    fixed_background: DecayRates = field(default_factory=lambda: ZERO_RATES)
    f_multiplier: float = 1.0        # extra weight on the |2>->|1> channel per defect
    linewidth_init_mhz: float = 10.0
    linewidth_bounds_mhz: tuple[float, float] = (0.05, 500.0)
    coupling_bounds: tuple[float, float] = (1e-10, 1e8)

    def band(self, device: DeviceFrequencies) -> tuple[float, float]:
        return (device.omega_12 - self.band_margin_mhz,
                device.omega_01 + self.band_margin_mhz)


DEFAULT_TRACKER_CONFIG = TrackerConfig()


@dataclass
class TrackerFit:
    """Result of a tracker inversion."""

    model_order: int
    parameters: TlsParameterSet
    fitted_rates: list[DecayRates]
    misfit: float
    converged: bool
    iterations: int
    epochs_hr: np.ndarray
    warnings: list[str] = field(default_factory=list)
    information_score: Optional[float] = None
    model_scores: Optional[dict[int, float]] = None

    def fitted_rate_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        g10 = np.array([r.gamma_10 for r in self.fitted_rates])
        g21 = np.array([r.gamma_21 for r in self.fitted_rates])
        return g10, g21

    def to_json_dict(self) -> dict:
        return {
            "model_order": self.model_order,
            "misfit": float(self.misfit),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "warnings": list(self.warnings),
            "information_score": self.information_score,
            "model_scores": (
                None
                if self.model_scores is None
                else {str(k): float(v) for k, v in self.model_scores.items()}
            ),
            "tls": [
                {"B": d.coupling_weight, "gamma_mhz": d.linewidth_mhz}
                for d in self.parameters.defects
            ],
            "background": {
                "gamma10": self.parameters.background.gamma_10,
                "gamma21": self.parameters.background.gamma_21,
            },
            "n_epochs": int(self.epochs_hr.size),
        }


# -- internal model arithmetic ---------------------------------------------


def _model_rates(
    device: DeviceFrequencies,
    coupling: np.ndarray,
    linewidth: np.ndarray,
    bg: np.ndarray,
    freqs: np.ndarray,
    f_multiplier: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Rate arrays for defect frequencies ``freqs`` of shape (order, ...)."""
    g10 = np.full(freqs.shape[1:], bg[0], dtype=float)
    g21 = np.full(freqs.shape[1:], bg[1], dtype=float)
    for n in range(freqs.shape[0]):
        de = device.omega_01 - freqs[n]
        df = device.omega_12 - freqs[n]
        g10 = g10 + coupling[n] * linewidth[n] / (de**2 + linewidth[n] ** 2)
        g21 = g21 + f_multiplier * coupling[n] * linewidth[n] / (df**2 + linewidth[n] ** 2)
    return g10, g21


def _stacked_residuals(g10_model, g21_model, g10_meas, g21_meas,
                       w_e=1.0, w_f=1.0) -> np.ndarray:
    # epoch-major (e, f) interleaving; fixed order keeps the misfit
    # accumulation independent of any inner parallelism
    r = np.empty(2 * g10_meas.size)
    r[0::2] = w_e * (1.0 - g10_model / g10_meas)
    r[1::2] = w_f * (1.0 - g21_model / g21_meas)
    return r


class _Workspace:
    """Shared arrays and closures for one tracker run."""

    def __init__(self, series: LifetimeSeries, device: DeviceFrequencies,
                 order: int, config: TrackerConfig):
        self.series = series
        self.device = device
        self.order = order
        self.config = config
        self.g10_meas, self.g21_meas = series.rates()
        self.n = series.n_epochs
        self.band = config.band(device)
        self.n_globals = 2 * order + (2 if config.fit_background else 0)
        # residual weights: inverse relative lifetime errors when reported
        if config.use_reported_errors and series.has_errors:
            self.w_e = 1.0 / np.maximum(series.err_e_us / series.t1e_us, 1e-12)
            self.w_f = 1.0 / np.maximum(series.err_f_us / series.t1f_us, 1e-12)
            self.weighted = True
        else:
            self.w_e = np.ones(self.n)
            self.w_f = np.ones(self.n)
            self.weighted = False

    def misfit_floor(self) -> float:
        """Convergence floor for the weighted misfit.

        With reported errors the residuals are in units of their standard
        deviation, so descending below ~sqrt(N) only chases measurement
        noise (discrepancy principle); without errors the floor is a pure
        numerical-accuracy guard.
        """
        n_res = math.sqrt(2.0 * self.n)
        if self.weighted:
            return self.config.noise_floor_factor * n_res
        return self.config.misfit_floor * n_res

    def residuals(self, coupling, linewidth, bg, traj) -> np.ndarray:
        g10, g21 = _model_rates(
            self.device, coupling, linewidth, bg, traj, self.config.f_multiplier
        )
        return _stacked_residuals(g10, g21, self.g10_meas, self.g21_meas,
                                  self.w_e, self.w_f)

    def misfit(self, coupling, linewidth, bg, traj) -> float:
        return float(np.linalg.norm(self.residuals(coupling, linewidth, bg, traj)))

    def epoch_cost(self, freqs: np.ndarray, epoch: int, coupling, linewidth, bg) -> np.ndarray:
        """Vectorized per-epoch cost over candidate frequencies (order, m)."""
        g10, g21 = _model_rates(self.device, coupling, linewidth, bg, freqs,
                                self.config.f_multiplier)
        return (self.w_e[epoch] * (1.0 - g10 / self.g10_meas[epoch])) ** 2 + (
            self.w_f[epoch] * (1.0 - g21 / self.g21_meas[epoch])
        ) ** 2

    # -- packing: [B_k, gamma_k]*order, [bg_e, bg_f]?, omega[k, :] flattened

    def unpack_globals(self, params: np.ndarray):
        order = self.order
        coupling = params[0 : 2 * order : 2]
        linewidth = params[1 : 2 * order : 2]
        if self.config.fit_background:
            bg = params[2 * order : 2 * order + 2]
        else:
            bg = np.array(
                [self.config.fixed_background.gamma_10, self.config.fixed_background.gamma_21]
            )
        return coupling, linewidth, bg

    def global_bounds(self):
        cfg = self.config
        lo, hi = [], []
        for _ in range(self.order):
            lo += [cfg.coupling_bounds[0], cfg.linewidth_bounds_mhz[0]]
            hi += [cfg.coupling_bounds[1], cfg.linewidth_bounds_mhz[1]]
        if cfg.fit_background:
            # the floor can never exceed the smallest measured rate per channel
            lo += [0.0, 0.0]
            hi += [float(np.min(self.g10_meas)), float(np.min(self.g21_meas))]
        return np.array(lo), np.array(hi)

    def joint_bounds(self):
        glo, ghi = self.global_bounds()
        wlo = np.full(self.order * self.n, self.band[0])
        whi = np.full(self.order * self.n, self.band[1])
        return np.concatenate([glo, wlo]), np.concatenate([ghi, whi])

    def pack_joint(self, glob: np.ndarray, traj: np.ndarray) -> np.ndarray:
        return np.concatenate([glob, traj.reshape(-1)])

    def unpack_joint(self, x: np.ndarray):
        glob = x[: self.n_globals]
        traj = x[self.n_globals :].reshape(self.order, self.n)
        return glob, traj

    def joint_residual(self, x: np.ndarray) -> np.ndarray:
        glob, traj = self.unpack_joint(x)
        coupling, linewidth, bg = self.unpack_globals(glob)
        r = self.residuals(coupling, linewidth, bg, traj)
        pen = self.config.drift_penalty
        if pen > 0.0 and self.n > 1:
            sw = math.sqrt(pen)
            r = np.concatenate([r, (sw * np.diff(traj, axis=1)).reshape(-1)])
        return r

    def joint_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Analytic derivatives of the joint residual.

        Finite differences are too noisy here: near the optimum the
        (B, gamma) directions form a shallow valley whose gradient is below
        the forward-difference truncation error, which stalls the solver.
        """
        glob, traj = self.unpack_joint(x)
        coupling, linewidth, bg = self.unpack_globals(glob)
        cfg = self.config
        n, order = self.n, self.order
        n_rows = 2 * n
        pen_rows = order * (n - 1) if (cfg.drift_penalty > 0.0 and n > 1) else 0
        jac = np.zeros((n_rows + pen_rows, x.size))
        scale_e = -self.w_e / self.g10_meas
        scale_f = -self.config.f_multiplier * self.w_f / self.g21_meas
        for k in range(order):
            b, g, w = coupling[k], linewidth[k], traj[k]
            de = self.device.omega_01 - w
            df = self.device.omega_12 - w
            den_e = de**2 + g**2
            den_f = df**2 + g**2
            # couplings and linewidths
            jac[0::2, 2 * k] = scale_e * (g / den_e)
            jac[1::2, 2 * k] = scale_f * (g / den_f)
            jac[0::2, 2 * k + 1] = scale_e * b * (de**2 - g**2) / den_e**2
            jac[1::2, 2 * k + 1] = scale_f * b * (df**2 - g**2) / den_f**2
            # per-epoch frequencies
            cols = self.n_globals + k * n + np.arange(n)
            jac[2 * np.arange(n), cols] = scale_e * b * 2.0 * g * de / den_e**2
            jac[2 * np.arange(n) + 1, cols] = scale_f * b * 2.0 * g * df / den_f**2
        if cfg.fit_background:
            jac[0::2, 2 * order] = -self.w_e / self.g10_meas
            jac[1::2, 2 * order + 1] = -self.w_f / self.g21_meas
        if pen_rows:
            sw = math.sqrt(cfg.drift_penalty)
            row = n_rows
            for k in range(order):
                base = self.n_globals + k * n
                for i in range(n - 1):
                    jac[row, base + i + 1] = sw
                    jac[row, base + i] = -sw
                    row += 1
        return jac


def _joint_update(ws: _Workspace, glob: np.ndarray, traj: np.ndarray):
    """Levenberg-Marquardt update of the globals, jointly with the trajectory."""
    lo, hi = ws.joint_bounds()
    x0 = np.clip(ws.pack_joint(glob, traj), lo, hi)
    result = levenberg_marquardt(
        LeastSquaresProblem(ws.joint_residual, x0, lo, hi, jacobian=ws.joint_jacobian),
        FitOptions(max_iterations=ws.config.joint_lm_iterations),
    )
    return ws.unpack_joint(result.parameters)


# -- deterministic level-matched starts --------------------------------------


def _initial_states(ws: _Workspace) -> list[tuple[np.ndarray, np.ndarray]]:
    """Start list: defects placed across the band with couplings solved so the
    static model matches the median measured rates."""
    dev, cfg = ws.device, ws.config
    w01, w12 = dev.omega_01, dev.omega_12
    span = w01 - w12
    g0 = cfg.linewidth_init_mhz
    med_e = float(np.median(ws.g10_meas))
    med_f = float(np.median(ws.g21_meas))
    blo, bhi = cfg.coupling_bounds

    def lorentz(w, probe):
        return g0 / ((probe - w) ** 2 + g0**2)

    states = []
    if ws.order == 1:
        for w in (w12 + 0.25 * span, w12 + 0.5 * span, w12 + 0.75 * span):
            ae = lorentz(w, w01) / med_e
            af = lorentz(w, w12) / med_f
            b0 = float(np.clip((ae + af) / (ae**2 + af**2), blo, bhi))
            glob = [b0, g0] + ([0.0, 0.0] if cfg.fit_background else [])
            states.append((np.array(glob), np.full((1, ws.n), w)))
    else:
        pairs = [
            (w01 - 0.15 * span, w12 + 0.15 * span),
            (w01 - 0.35 * span, w12 + 0.35 * span),
            (w01 + 0.1 * span, w12 - 0.1 * span),
        ]
        for w1, w2 in pairs:
            a = np.array([
                [lorentz(w1, w01), lorentz(w2, w01)],
                [lorentz(w1, w12), lorentz(w2, w12)],
            ])
            try:
                b = np.linalg.solve(a, np.array([med_e, med_f]))
            except np.linalg.LinAlgError:
                b = np.array([g0 * med_e, g0 * med_f])
            b = np.clip(b, blo, bhi)
            glob = [float(b[0]), g0, float(b[1]), g0] + (
                [0.0, 0.0] if cfg.fit_background else []
            )
            traj = np.vstack([np.full(ws.n, w1), np.full(ws.n, w2)])
            states.append((np.array(glob), traj))
    return states


# -- stage B: per-epoch frequency solves ------------------------------------


def _select_candidate(cands: list[tuple[np.ndarray, float]], ref: Optional[np.ndarray],
                      cfg: TrackerConfig) -> np.ndarray:
    fbest = min(f for _, f in cands)
    near = [(x, f) for x, f in cands if f <= fbest * (1.0 + cfg.tie_rel) + cfg.tie_abs]
    if ref is None or len(near) == 1:
        return min(near, key=lambda c: c[1])[0]
    return min(near, key=lambda c: float(np.sum(np.abs(c[0] - ref))))[0]


def _epoch_candidates_1d(ws: _Workspace, epoch: int, coupling, linewidth, bg,
                         prev_traj: Optional[np.ndarray]) -> list[tuple[np.ndarray, float]]:
    cfg = ws.config
    xs = np.linspace(ws.band[0], ws.band[1], cfg.coarse_points)
    fs = ws.epoch_cost(xs[None, :], epoch, coupling, linewidth, bg)
    if cfg.drift_penalty > 0.0 and prev_traj is not None:
        fs = fs + _drift_terms(xs, epoch, prev_traj[0], cfg.drift_penalty)

    def objective(w: float) -> float:
        c = float(ws.epoch_cost(np.array([[w]]), epoch, coupling, linewidth, bg)[0])
        if cfg.drift_penalty > 0.0 and prev_traj is not None:
            c += float(_drift_terms(np.array([w]), epoch, prev_traj[0], cfg.drift_penalty)[0])
        return c

    idx = _local_minima(fs)[: cfg.max_candidates]
    cands = []
    for i in idx:
        a = xs[max(i - 1, 0)]
        b = xs[min(i + 1, xs.size - 1)]
        x = grid_refine_1d(objective, (float(a), float(b)), 3, cfg.refine_tol_mhz)
        cands.append((np.array([x]), objective(x)))
    return cands


def _drift_terms(xs: np.ndarray, epoch: int, prev: np.ndarray, weight: float) -> np.ndarray:
    pen = np.zeros_like(xs)
    if epoch > 0:
        pen = pen + weight * (xs - prev[epoch - 1]) ** 2
    if epoch + 1 < prev.size:
        pen = pen + weight * (xs - prev[epoch + 1]) ** 2
    return pen


def _local_minima(fs: np.ndarray) -> list[int]:
    idx = []
    for i in range(fs.size):
        left = fs[i - 1] if i > 0 else np.inf
        right = fs[i + 1] if i + 1 < fs.size else np.inf
        if fs[i] <= left and fs[i] <= right:
            idx.append(i)
    idx.sort(key=lambda i: fs[i])
    return idx


def _epoch_candidates_2d(ws: _Workspace, epoch: int, coupling, linewidth, bg,
                         prev_traj: Optional[np.ndarray]) -> list[tuple[np.ndarray, float]]:
    cfg = ws.config
    m = cfg.coarse_points_2d
    axis = np.linspace(ws.band[0], ws.band[1], m)
    w1, w2 = np.meshgrid(axis, axis, indexing="ij")
    grid = np.stack([w1.ravel(), w2.ravel()])
    fs = ws.epoch_cost(grid, epoch, coupling, linewidth, bg)

    order_idx = np.argsort(fs)
    cell = (ws.band[1] - ws.band[0]) / (m - 1)
    seeds: list[np.ndarray] = []
    for i in order_idx:
        pt = grid[:, i]
        if all(np.max(np.abs(pt - s)) > 1.5 * cell for s in seeds):
            seeds.append(pt)
        if len(seeds) >= cfg.max_candidates:
            break
    if prev_traj is not None:
        seeds.append(prev_traj[:, epoch].copy())

    lo = np.full(2, ws.band[0])
    hi = np.full(2, ws.band[1])

    def residual(p):
        g10, g21 = _model_rates(ws.device, coupling, linewidth, bg, p[:, None],
                                cfg.f_multiplier)
        r = [ws.w_e[epoch] * (1.0 - g10[0] / ws.g10_meas[epoch]),
             ws.w_f[epoch] * (1.0 - g21[0] / ws.g21_meas[epoch])]
        if cfg.drift_penalty > 0.0 and prev_traj is not None:
            sw = math.sqrt(cfg.drift_penalty)
            for k in range(2):
                if epoch > 0:
                    r.append(sw * (p[k] - prev_traj[k, epoch - 1]))
                if epoch + 1 < ws.n:
                    r.append(sw * (p[k] - prev_traj[k, epoch + 1]))
        return np.array(r)

    cands = []
    for seed in seeds:
        result = levenberg_marquardt(
            LeastSquaresProblem(residual, np.clip(seed, lo, hi), lo, hi),
            FitOptions(max_iterations=100),
        )
        cands.append((result.parameters.copy(), float(result.residual_norm**2)))
    return cands


def _solve_epochs(ws: _Workspace, coupling, linewidth, bg,
                  prev_traj: Optional[np.ndarray]) -> np.ndarray:
    """Per-epoch frequency solves followed by a sequential continuity pass.

    Candidate generation for each epoch is independent (parallelizable);
    the final selection runs in epoch order so near-equal minima tie-break
    toward the previous epoch's chosen frequency.
    """
    maker = _epoch_candidates_1d if ws.order == 1 else _epoch_candidates_2d
    all_cands = [
        maker(ws, e, coupling, linewidth, bg, prev_traj) for e in range(ws.n)
    ]
    traj = np.empty((ws.order, ws.n))
    ref = None if prev_traj is None else prev_traj[:, 0].copy()
    for e in range(ws.n):
        pick = _select_candidate(all_cands[e], ref, ws.config)
        traj[:, e] = pick
        ref = pick
    return traj


# -- public API -------------------------------------------------------------


def track_tls(
    series: LifetimeSeries,
    device: DeviceFrequencies,
    order: int,
    config: TrackerConfig = DEFAULT_TRACKER_CONFIG,
) -> TrackerFit:
    """Fit a drifting one- or two-defect model to a lifetime series."""
    if order not in (1, 2):
        raise InvalidParameterError(f"model order must be 1 or 2, got {order!r}")
    if series.n_epochs < 3:
        raise InvalidParameterError("need at least 3 epochs to track")

    warnings = []
    if series.n_epochs < 10:
        warnings.append(f"only {series.n_epochs} epochs; tracking is unreliable below 10")
    if order == 2 and series.n_epochs < 25:
        warnings.append("two-defect model with fewer than 25 epochs: weak identifiability")

    ws = _Workspace(series, device, order, config)

    def outer_cycle(glob, traj):
        coupling, linewidth, bg = ws.unpack_globals(glob)
        traj = _solve_epochs(ws, coupling, linewidth, bg, traj)
        glob, traj = _joint_update(ws, glob, traj)
        coupling, linewidth, bg = ws.unpack_globals(glob)
        return glob, traj, ws.misfit(coupling, linewidth, bg, traj)

    # probe every start before committing to the best basin; near-equal
    # probes (a saturated model can interpolate from several basins)
    # tie-break toward the earliest, physically-preferred start
    probes = []
    for glob, traj in _initial_states(ws):
        misfit = math.inf
        for _ in range(max(config.probe_iterations, 1)):
            glob, traj, misfit = outer_cycle(glob, traj)
        probes.append((misfit, glob, traj))
    m_best = min(p[0] for p in probes)
    floor = m_best + max(config.tie_rel * m_best, config.probe_tie_abs)
    best = next(i for i, p in enumerate(probes) if p[0] <= floor)
    misfit, glob, traj = probes[best]

    floor_abs = ws.misfit_floor()
    converged = misfit <= floor_abs
    misfit_prev = misfit
    iteration = max(config.probe_iterations, 1)
    while not converged and iteration < config.outer_iterations:
        iteration += 1
        glob, traj, misfit = outer_cycle(glob, traj)
        if misfit <= floor_abs or abs(misfit_prev - misfit) <= config.misfit_rtol * max(
            misfit_prev, _TINY
        ):
            converged = True
            break
        misfit_prev = misfit

    # sync trajectories to the final globals
    coupling, linewidth, bg = ws.unpack_globals(glob)
    traj = _solve_epochs(ws, coupling, linewidth, bg, traj)
    misfit = ws.misfit(coupling, linewidth, bg, traj)

    g10, g21 = _model_rates(device, coupling, linewidth, bg, traj, config.f_multiplier)
    defects = [
        TlsDefect(float(coupling[k]), float(linewidth[k]), traj[k].copy())
        for k in range(order)
    ]
    parameters = TlsParameterSet(defects, DecayRates(float(bg[0]), float(bg[1])))
    fitted = [DecayRates(float(a), float(b)) for a, b in zip(g10, g21)]
    if not converged:
        warnings.append("outer loop hit the iteration cap before the misfit settled")
    return TrackerFit(
        model_order=order,
        parameters=parameters,
        fitted_rates=fitted,
        misfit=misfit,
        converged=converged,
        iterations=iteration,
        epochs_hr=series.epochs_hr.copy(),
        warnings=warnings,
    )


def _global_parameter_count(order: int, config: TrackerConfig) -> int:
    return 2 * order + (2 if config.fit_background else 0)


def information_score(
    fit: TrackerFit, series: LifetimeSeries, config: TrackerConfig = DEFAULT_TRACKER_CONFIG
) -> float:
    """Bayesian information criterion for one tracker fit.

    With per-epoch standard errors available the Gaussian log-likelihood
    with *known* variances is used: score = chi^2 + k ln(N).  Otherwise the
    common-variance form N ln(misfit^2/N) + k ln(N) applies, with the
    squared misfit floored to keep a saturated model (which can interpolate
    the data exactly) comparable.
    """
    n_res = 2 * series.n_epochs
    k = _global_parameter_count(fit.model_order, config) + series.n_epochs * fit.model_order
    g10_fit, g21_fit = fit.fitted_rate_arrays()
    g10_meas, g21_meas = series.rates()
    if config.use_reported_errors and series.has_errors:
        rel_e = np.maximum(series.err_e_us / series.t1e_us, 1e-12)
        rel_f = np.maximum(series.err_f_us / series.t1f_us, 1e-12)
        chi2 = float(
            np.sum(((1.0 - g10_fit / g10_meas) / rel_e) ** 2)
            + np.sum(((1.0 - g21_fit / g21_meas) / rel_f) ** 2)
        )
        return chi2 + k * math.log(n_res)
    # misfits below the tracker's own convergence floor are numerically
    # equal; without the clamp a saturated model's ln(misfit^2) diverges
    floor_sq = config.misfit_floor**2 * n_res
    misfit_sq = max(fit.misfit**2, floor_sq)
    return n_res * math.log(misfit_sq / n_res) + k * math.log(n_res)


def select_model(
    series: LifetimeSeries,
    device: DeviceFrequencies,
    config: TrackerConfig = DEFAULT_TRACKER_CONFIG,
) -> TrackerFit:
    """Fit both model orders and keep the one with the lower information score."""
    fits = {order: track_tls(series, device, order, config) for order in (1, 2)}
    scores = {order: information_score(fit, series, config) for order, fit in fits.items()}
    chosen = min(sorted(scores), key=lambda order: scores[order])
    fit = fits[chosen]
    fit.information_score = scores[chosen]
    fit.model_scores = scores
    return fit


def lifetime_correlation(series: LifetimeSeries) -> float:
    """Pearson correlation of the (t1e, t1f) pairs."""
    if series.n_epochs < 3:
        raise InvalidParameterError("need at least 3 epochs for a correlation")
    x, y = series.t1e_us, series.t1f_us
    if np.var(x) == 0.0 or np.var(y) == 0.0:
        raise UndefinedCorrelationError("a lifetime channel has zero variance")
    return float(np.corrcoef(x, y)[0, 1])


def reconstruct_trajectory(fit: TrackerFit, tls_index: int) -> list[tuple[float, float, float]]:
    """Per-epoch (timestamp_hr, omega_mhz, gamma_mhz) for one fitted defect."""
    if not 0 <= tls_index < fit.model_order:
        raise InvalidParameterError(
            f"tls_index {tls_index} out of range for order {fit.model_order}"
        )
    d = fit.parameters.defects[tls_index]
    return [
        (float(t), float(w), d.linewidth_mhz)
        for t, w in zip(fit.epochs_hr, d.trajectory_mhz)
    ]


def write_trajectory_csv(fit: TrackerFit, path) -> None:
    """Plot-ready long-format trajectory table (t_hr, tls, omega_mhz, gamma_mhz)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_hr", "tls", "omega_mhz", "gamma_mhz"])
        for k in range(fit.model_order):
            for t, omega, gamma in reconstruct_trajectory(fit, k):
                w.writerow([repr(t), k, repr(omega), repr(gamma)])


def write_correlation_csv(fit: TrackerFit, series: LifetimeSeries, path) -> None:
    """Measured vs. fitted lifetime pairs (t1e_us, t1f_us, t1e_fit_us, t1f_fit_us)."""
    g10, g21 = fit.fitted_rate_arrays()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t1e_us", "t1f_us", "t1e_fit_us", "t1f_fit_us"])
        for i in range(series.n_epochs):
            w.writerow([
                repr(float(series.t1e_us[i])),
                repr(float(series.t1f_us[i])),
                repr(float(1.0 / g10[i])),
                repr(float(1.0 / g21[i])),
            ])
