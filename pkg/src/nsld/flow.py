"""Time integration of the deterministic, stochastic, controlled and nudged flows.

One step advances  du/dt + L u + B(u,u) = h + phi + noise  by an exponential
Euler rule: the stiff diagonal part is integrated exactly per mode, the
advection term and forcing are held constant over the step, and the additive
noise increment is the exact Ornstein-Uhlenbeck one, so the scheme reduces to
the exact solution whenever the advection term is switched off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .spectral import (
    BasisSpec,
    NoiseSpec,
    SpectralField,
    _check_basis,
    _check_noise,
    bilinear_raw,
    low_mode_mask,
)

BLOWUP_THRESHOLD = 1e12


class NumericalBlowupError(RuntimeError):
    """Amplitudes left the trusted range; the step size is too large."""

    def __init__(self, step: int, t: float, max_amp: float):
        self.step = step
        self.t = t
        self.max_amp = max_amp
        super().__init__(
            f"non-finite or oversized amplitude (max {max_amp:.3e}) at step {step}, t={t:.6g}"
        )


@dataclass(frozen=True)
class FlowConfig:
    """Integration parameters shared by all flow variants."""

    h: SpectralField
    noise: NoiseSpec
    dt: float = 1e-3
    epsilon: float = 0.0
    seed: int = 0
    advection: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        _check_noise(self.h.basis, self.noise)

    @property
    def basis(self) -> BasisSpec:
        return self.h.basis

    def with_epsilon(self, epsilon: float) -> "FlowConfig":
        return replace(self, epsilon=epsilon)


def default_forcing(basis: BasisSpec, scale: float = 1.0) -> SpectralField:
    """Fixed low-mode forcing pattern; scale 1 keeps the flow strongly contracting."""
    amps = np.zeros(basis.n_modes, dtype=np.complex128)
    pattern = {(1, 0): 0.32, (0, 1): 0.22 + 0.14j, (1, 1): 0.10j}
    for k, a in pattern.items():
        amps[basis.mode_index(k)] = a * scale
    return SpectralField(basis, amps)


def derive_rng(base_seed: int, index: int = 0) -> np.random.Generator:
    """Independent stream per worker: seed = base_seed XOR index."""
    return np.random.default_rng(int(base_seed) ^ int(index))


@dataclass(frozen=True)
class CouplingConfig:
    """Nudging gain and the number of low modes fed back."""

    kappa: float
    n_modes: int

    def __post_init__(self):
        if self.kappa < 0 or self.n_modes < 0:
            raise ValueError("kappa and n_modes must be >= 0")


@dataclass
class Trajectory:
    """States and norm observables on a uniform time grid starting at 0."""

    basis: BasisSpec
    times: np.ndarray      # (n+1,)
    amps: np.ndarray       # (n+1, M) complex
    h_norms: np.ndarray
    v_norms: np.ndarray

    def __len__(self):
        return self.times.size

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def state(self, i: int) -> SpectralField:
        return SpectralField(self.basis, self.amps[i])

    @property
    def final(self) -> SpectralField:
        return self.state(-1)


class Stepper:
    """Precomputed per-mode factors for one (config, epsilon) pair.

    Operates on raw amplitude arrays of shape (..., M) so independent
    trajectories can be advanced in one vectorized call.
    """

    def __init__(self, cfg: FlowConfig, epsilon: float | None = None):
        self.cfg = cfg
        self.basis = cfg.basis
        lam = cfg.basis.eigenvalues
        dt = cfg.dt
        self.decay = np.exp(-lam * dt)
        self.gain = (1.0 - self.decay) / lam
        self.h_amps = cfg.h.amps
        eps = cfg.epsilon if epsilon is None else epsilon
        if eps < 0:
            raise ValueError("epsilon must be >= 0")
        self.epsilon = eps
        if eps > 0:
            var = eps * cfg.noise.b ** 2 * (1.0 - np.exp(-2.0 * lam * dt)) / (2.0 * lam)
            self.noise_std = np.sqrt(var)
        else:
            self.noise_std = None

    def drift_rhs(self, amps: np.ndarray, control: np.ndarray | None = None) -> np.ndarray:
        f = self.h_amps - bilinear_raw(self.basis, amps, amps) if self.cfg.advection \
            else np.broadcast_to(self.h_amps, amps.shape)
        if control is not None:
            f = f + control
        return f

    def step(self, amps: np.ndarray, rng: np.random.Generator | None = None,
             control: np.ndarray | None = None) -> np.ndarray:
        out = self.decay * amps + self.gain * self.drift_rhs(amps, control)
        if self.noise_std is not None:
            if rng is None:
                raise ValueError("stochastic step needs an rng")
            xi = rng.standard_normal(out.shape) + 1j * rng.standard_normal(out.shape)
            out = out + self.noise_std * xi
        return out

    def check(self, amps: np.ndarray, step_idx: int):
        m = np.max(np.abs(amps))
        if not np.isfinite(m) or m > BLOWUP_THRESHOLD:
            raise NumericalBlowupError(step_idx, step_idx * self.cfg.dt, float(m))


def step_deterministic(u: SpectralField, cfg: FlowConfig) -> SpectralField:
    stepper = _cached_stepper(cfg, 0.0)
    out = stepper.step(u.amps)
    stepper.check(out, 1)
    return SpectralField(u.basis, out)


def step_stochastic(u: SpectralField, cfg: FlowConfig, rng: np.random.Generator) -> SpectralField:
    if cfg.epsilon == 0.0:
        return step_deterministic(u, cfg)
    stepper = _cached_stepper(cfg, cfg.epsilon)
    out = stepper.step(u.amps, rng=rng)
    stepper.check(out, 1)
    return SpectralField(u.basis, out)


def step_controlled(u: SpectralField, cfg: FlowConfig, phi_t: SpectralField) -> SpectralField:
    _check_basis(u, phi_t)
    stepper = _cached_stepper(cfg, 0.0)
    out = stepper.step(u.amps, control=phi_t.amps)
    stepper.check(out, 1)
    return SpectralField(u.basis, out)


_STEPPER_CACHE: dict = {}


def _cached_stepper(cfg: FlowConfig, epsilon: float) -> Stepper:
    key = (id(cfg.basis), cfg.dt, float(epsilon), cfg.advection,
           cfg.h.amps.tobytes(), cfg.noise.b.tobytes())
    got = _STEPPER_CACHE.get(key)
    if got is None:
        got = Stepper(cfg, epsilon)
        if len(_STEPPER_CACHE) > 64:
            _STEPPER_CACHE.clear()
        _STEPPER_CACHE[key] = got
    return got


def n_steps_for(T: float, dt: float) -> int:
    if T <= 0:
        raise ValueError("horizon must be positive")
    n = int(round(T / dt))
    return max(n, 1)


def integrate(u0: SpectralField, cfg: FlowConfig, T: float, *,
              epsilon: float | None = None,
              control: np.ndarray | None = None,
              rng: np.random.Generator | None = None) -> Trajectory:
    """Advance from u0 for time T and record every grid point.

    control, if given, is an (n_steps, M) complex array applied piecewise
    constant per step.  epsilon overrides cfg.epsilon; zero gives the
    deterministic flow regardless of rng.
    """
    eps = cfg.epsilon if epsilon is None else epsilon
    n = n_steps_for(T, cfg.dt)
    if control is not None:
        control = np.asarray(control, dtype=np.complex128)
        if control.shape != (n, cfg.basis.n_modes):
            raise ValueError(f"control must have shape ({n}, {cfg.basis.n_modes})")
    stepper = Stepper(cfg, eps)
    if eps > 0 and rng is None:
        rng = np.random.default_rng(cfg.seed)

    M = cfg.basis.n_modes
    amps = np.empty((n + 1, M), dtype=np.complex128)
    amps[0] = u0.amps
    x = u0.amps
    for i in range(n):
        x = stepper.step(x, rng=rng if eps > 0 else None,
                         control=None if control is None else control[i])
        if i % 64 == 0 or i == n - 1:
            stepper.check(x, i + 1)
        amps[i + 1] = x
    times = np.arange(n + 1) * cfg.dt
    absa = np.abs(amps)
    h_norms = np.sqrt((absa ** 2).sum(axis=1))
    v_norms = np.sqrt((cfg.basis.eigenvalues * absa ** 2).sum(axis=1))
    return Trajectory(cfg.basis, times, amps, h_norms, v_norms)


@dataclass
class ContractionLog:
    """Distance between the reference and nudged flows along the run."""

    times: np.ndarray
    dist: np.ndarray           # ||u - w|| per grid point
    grad_integral: np.ndarray  # cumulative integral of |u|_V^2

    def log_slope(self, floor: float = 1e-11) -> float:
        """Least-squares slope of ln dist over the window above the precision floor."""
        d0 = self.dist[0]
        if d0 == 0:
            return 0.0
        keep = self.dist > max(floor * d0, 1e-300)
        if keep.sum() < 3:
            keep = np.zeros_like(keep)
            keep[:3] = True
        t = self.times[keep]
        y = np.log(self.dist[keep])
        a = np.polyfit(t, y, 1)
        return float(a[0])


def integrate_coupled(u0: SpectralField, w0: SpectralField, cfg: FlowConfig,
                      coupling: CouplingConfig, phi: np.ndarray | None,
                      T: float) -> tuple:
    """Run the controlled flow u and the nudged flow w on a shared grid.

    w is forced by the same control plus kappa * P_N(u - w).  Returns both
    trajectories and the contraction log.
    """
    _check_basis(u0, w0)
    n = n_steps_for(T, cfg.dt)
    M = cfg.basis.n_modes
    if phi is not None:
        phi = np.asarray(phi, dtype=np.complex128)
        if phi.shape != (n, M):
            raise ValueError(f"phi must have shape ({n}, {M})")
    stepper = Stepper(cfg, 0.0)
    mask = low_mode_mask(cfg.basis, coupling.n_modes)

    amps_u = np.empty((n + 1, M), dtype=np.complex128)
    amps_w = np.empty((n + 1, M), dtype=np.complex128)
    amps_u[0] = u0.amps
    amps_w[0] = w0.amps
    xu, xw = u0.amps, w0.amps
    for i in range(n):
        c = None if phi is None else phi[i]
        nudge = coupling.kappa * mask * (xu - xw)
        xu_next = stepper.step(xu, control=c)
        xw_next = stepper.step(xw, control=nudge if c is None else c + nudge)
        xu, xw = xu_next, xw_next
        if i % 64 == 0 or i == n - 1:
            stepper.check(xu, i + 1)
            stepper.check(xw, i + 1)
        amps_u[i + 1] = xu
        amps_w[i + 1] = xw

    times = np.arange(n + 1) * cfg.dt
    def _traj(a):
        absa = np.abs(a)
        return Trajectory(cfg.basis, times, a,
                          np.sqrt((absa ** 2).sum(axis=1)),
                          np.sqrt((cfg.basis.eigenvalues * absa ** 2).sum(axis=1)))
    tu, tw = _traj(amps_u), _traj(amps_w)
    dist = np.sqrt((np.abs(amps_u - amps_w) ** 2).sum(axis=1))
    grad = np.concatenate([[0.0], np.cumsum(tu.v_norms[:-1] ** 2) * cfg.dt])
    return tu, tw, ContractionLog(times, dist, grad)


# --- controlled-vs-free deviation envelope ---------------------------------

@dataclass
class DeviationFit:
    """Fitted constants (C, c) of the exponential envelope for ||S^phi - S||^2."""

    C: float
    c: float
    worst_ratio: float   # max over runs and grid times of deviation^2 / (C * envelope)
    n_runs: int

    @property
    def holds(self) -> bool:
        return self.worst_ratio <= 1.0 + 1e-9


def deviation_series(u0: SpectralField, phi: np.ndarray, cfg: FlowConfig, T: float):
    """Squared distance between controlled and free runs, plus the control memory
    integral int_0^t exp(-lam1 (t-s)) ||phi(s)||^2 ds on the same grid."""
    n = n_steps_for(T, cfg.dt)
    traj_c = integrate(u0, cfg, T, epsilon=0.0, control=phi)
    traj_f = integrate(u0, cfg, T, epsilon=0.0)
    dev_sq = ((np.abs(traj_c.amps - traj_f.amps) ** 2).sum(axis=1))
    lam1 = float(cfg.basis.eigenvalues.min())
    phi_sq = (np.abs(phi) ** 2).sum(axis=1)
    mem = np.zeros(n + 1)
    decay = math.exp(-lam1 * cfg.dt)
    for i in range(n):
        mem[i + 1] = decay * mem[i] + cfg.dt * phi_sq[i]
    return traj_c.times, dev_sq, mem


def fit_deviation_bound(runs, cfg: FlowConfig,
                        c_grid=(0.25, 0.5, 1.0, 2.0)) -> DeviationFit:
    """Fit the tightest (C, c) such that
    dev^2(t) <= C exp(c (||u0||^2 + t ||h||^2)) * memory(t) across all runs.

    runs is a list of (u0, phi, T) triples.
    """
    h_sq = cfg.h.h_norm() ** 2
    series = []
    for u0, phi, T in runs:
        t, dev_sq, mem = deviation_series(u0, phi, cfg, T)
        series.append((u0.h_norm() ** 2, t, dev_sq, mem))
    best = None
    for c in c_grid:
        C_needed = 0.0
        for u0_sq, t, dev_sq, mem in series:
            env = np.exp(c * (u0_sq + t * h_sq)) * mem
            ok = env > 0
            if np.any(dev_sq[~ok] > 1e-24):
                C_needed = math.inf
                break
            ratio = dev_sq[ok] / env[ok]
            if ratio.size:
                C_needed = max(C_needed, float(ratio.max()))
        if best is None or C_needed < best[0]:
            best = (C_needed, c)
    C, c = best
    C = C if C > 0 else 1.0
    worst = 0.0
    for u0_sq, t, dev_sq, mem in series:
        env = C * np.exp(c * (u0_sq + t * h_sq)) * mem
        ok = env > 0
        if ok.any():
            worst = max(worst, float((dev_sq[ok] / env[ok]).max()))
    return DeviationFit(C=C, c=c, worst_ratio=worst, n_runs=len(runs))
