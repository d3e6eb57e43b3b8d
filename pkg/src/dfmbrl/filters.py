"""Velocity and acceleration estimators from sampled positions.

Three baselines: causal numeric differentiation followed by a second-order
Butterworth low-pass (unit DC gain), a causal constant-velocity Kalman
filter, and the acausal Savitzky-Golay filter (centered least-squares
polynomial fit per window; mirror padding at the edges keeps a perturbation
at sample k confined to outputs within half a window of k).

Each filter instance processes one sequential stream; distinct instances are
independent. Warm-up sample counts are reported so dataset construction can
drop transient-contaminated rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps


@dataclass
class LowPassDiffConfig:
    cutoff_hz: float
    fs_hz: float
    kp: int = 5  # nominal history/warm-up length of the differentiator

    def validate(self) -> None:
        if self.cutoff_hz <= 0:
            raise ValueError("cutoff must be positive")
        if self.cutoff_hz >= 0.5 * self.fs_hz:
            raise ValueError(
                f"cutoff {self.cutoff_hz} Hz must be below the Nyquist "
                f"frequency {0.5 * self.fs_hz} Hz"
            )
        if self.kp < 1:
            raise ValueError("kp must be >= 1")


@dataclass
class KalmanConfig:
    sigma_x: float
    dt: float
    meas_var: float = 1e-6

    def validate(self) -> None:
        if self.sigma_x <= 0 or self.meas_var <= 0 or self.dt <= 0:
            raise ValueError("all Kalman variances and dt must be positive")


@dataclass
class SavGolConfig:
    window: int = 5
    order: int = 3

    def validate(self) -> None:
        if self.window % 2 == 0:
            raise ValueError("window must be odd")
        if self.order >= self.window:
            raise ValueError("polynomial order must be below the window length")


@dataclass
class LowPassDiffResult:
    velocity: np.ndarray
    acceleration: np.ndarray
    warmup: int


@dataclass
class KalmanResult:
    position: np.ndarray
    velocity: np.ndarray
    warmup: int


@dataclass
class SavGolResult:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    half_window: int


def low_pass_diff(signal, cfg: LowPassDiffConfig) -> LowPassDiffResult:
    """First differences scaled by the rate, then a causal low-pass.

    The acceleration applies the same difference-and-filter chain to the
    velocity. Output at step k depends only on samples up to k.
    """
    cfg.validate()
    x = np.asarray(signal, dtype=float)
    if x.size <= cfg.kp:
        raise ValueError(f"signal length {x.size} must exceed kp={cfg.kp}")
    b, a = sps.butter(2, cfg.cutoff_hz, fs=cfg.fs_hz)

    def diff_lp(s):
        d = np.zeros_like(s)
        d[1:] = np.diff(s) * cfg.fs_hz
        return sps.lfilter(b, a, d)

    vel = diff_lp(x)
    acc = diff_lp(vel)
    return LowPassDiffResult(vel, acc, cfg.kp)


def kalman_velocity(signal, cfg: KalmanConfig) -> KalmanResult:
    """Constant-velocity Kalman filter; causal.

    Process covariance is diag([sigma_x, 2 sigma_x]). The reported warm-up
    is the step where the Kalman gain has converged, plus margin for the
    state transient.
    """
    cfg.validate()
    z = np.asarray(signal, dtype=float)
    T = z.size
    F = np.array([[1.0, cfg.dt], [0.0, 1.0]])
    Q = np.diag([cfg.sigma_x, 2.0 * cfg.sigma_x])
    H = np.array([[1.0, 0.0]])
    R = cfg.meas_var
    x = np.array([z[0], 0.0])
    P = np.diag([cfg.meas_var, 1.0])
    pos = np.empty(T)
    vel = np.empty(T)
    pos[0], vel[0] = x
    prev_gain = None
    settled = T
    for k in range(1, T):
        x = F @ x
        P = F @ P @ F.T + Q
        s = P[0, 0] + R
        gain = P[:, 0] / s
        x = x + gain * (z[k] - x[0])
        P = P - np.outer(gain, P[0, :])
        pos[k], vel[k] = x
        if prev_gain is not None and settled == T:
            if np.max(np.abs(gain - prev_gain)) < 1e-8:
                settled = k
        prev_gain = gain
    # the state transient decays at the closed-loop rate; pad the gain
    # settling time with margin
    warmup = min(int(1.25 * settled) + 10, T - 1)
    return KalmanResult(pos, vel, warmup)


def savitzky_golay(signal, cfg: SavGolConfig, dt: float) -> SavGolResult:
    """Acausal Savitzky-Golay smoothing and differentiation.

    Derivative outputs carry the 1/dt and 1/dt^2 scaling. Mirror padding at
    the boundaries keeps the filter's support local (within half a window).
    """
    cfg.validate()
    x = np.asarray(signal, dtype=float)
    if x.size < cfg.window:
        raise ValueError(f"signal length {x.size} shorter than window {cfg.window}")
    pos = sps.savgol_filter(x, cfg.window, cfg.order, deriv=0, mode="mirror")
    vel = sps.savgol_filter(x, cfg.window, cfg.order, deriv=1, delta=dt, mode="mirror")
    acc = sps.savgol_filter(x, cfg.window, cfg.order, deriv=2, delta=dt, mode="mirror")
    return SavGolResult(pos, vel, acc, cfg.window // 2)


@dataclass
class DerivativeEstimate:
    """Adapter record consumed by derivative-based dataset construction."""

    velocity: np.ndarray
    acceleration: np.ndarray | None
    warmup_pre: int
    warmup_post: int


def derivative_estimator(kind: str, **params):
    """Factory for ``estimator(signal, dt) -> DerivativeEstimate`` callables.

    Kinds: ``lowpass`` (cutoff_hz, kp), ``kalman`` (sigma_x, meas_var),
    ``savgol`` (window, order). The Kalman estimator provides no
    acceleration estimate.
    """
    if kind == "lowpass":
        if "cutoff_hz" not in params:
            raise ValueError("lowpass filter requires cutoff_hz")
        cutoff = params.pop("cutoff_hz")
        kp = params.pop("kp", 5)
        _reject_extra(kind, params)

        def estimate(sig, dt):
            res = low_pass_diff(sig, LowPassDiffConfig(cutoff, 1.0 / dt, kp))
            return DerivativeEstimate(res.velocity, res.acceleration, res.warmup, 0)

        return estimate
    if kind == "kalman":
        if "sigma_x" not in params:
            raise ValueError("kalman filter requires sigma_x")
        sigma_x = params.pop("sigma_x")
        meas_var = params.pop("meas_var", 1e-6)
        _reject_extra(kind, params)

        def estimate(sig, dt):
            res = kalman_velocity(sig, KalmanConfig(sigma_x, dt, meas_var))
            return DerivativeEstimate(res.velocity, None, res.warmup, 0)

        return estimate
    if kind == "savgol":
        window = params.pop("window", 5)
        order = params.pop("order", 3)
        _reject_extra(kind, params)

        def estimate(sig, dt):
            res = savitzky_golay(sig, SavGolConfig(window, order), dt)
            return DerivativeEstimate(
                res.velocity, res.acceleration, res.half_window, res.half_window
            )

        return estimate
    raise ValueError(f"unknown filter kind {kind!r}")


def _reject_extra(kind, params):
    if params:
        raise ValueError(f"unknown {kind} filter parameters: {sorted(params)}")
