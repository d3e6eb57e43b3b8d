"""Ground-truth simulators: ball-and-beam and rotary (Furuta-style) pendulum.

Both plants integrate continuous dynamics with fixed-step RK4 over the
control period and expose per-step measurements with configurable sensing
imperfections. Actuation imperfections are modeled explicitly:

Ball-and-beam: the commanded beam angle passes through a per-step rate limit
and a first-order servo lag; the ball sees the lagged beam angle. Ball
position is measured by a camera (Gaussian noise); beam angle by an absolute
encoder (quantization).

Pendulum: the commanded base angle passes through a per-step displacement
limit, an optional pure delay, and a second-order resonant filter modeling
gripper/base elasticity. The pendulum arm is driven by the filter's output
angle and its analytic first and second derivatives (the filter is part of
the integrated state, so no numerical differentiation is involved). Angle
convention: theta = 0 is upright; the hanging rest is theta = pi. The
velocity term of the arm dynamics enters with a plus sign, so physical
damping corresponds to a negative damping coefficient.

Each plant instance owns its state and serves one sequential caller;
independent instances can run concurrently.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .filters import SavGolConfig, savitzky_golay
from .statespace import Trajectory

TWO_PI = 2.0 * np.pi


class SimulationDiverged(RuntimeError):
    """Plant state became non-finite."""


def _rk4(rhs, x: np.ndarray, dt: float, substeps: int) -> np.ndarray:
    h = dt / substeps
    for _ in range(substeps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


# --- ball and beam ---------------------------------------------------------------


@dataclass
class BBParams:
    mass: float = 0.032            # ball mass [kg]
    inertia: float = 1.28e-6       # ball inertia [kg m^2]
    radius: float = 0.01           # ball radius [m]
    friction: float = 0.05         # viscous friction [N s/m]
    length: float = 1.0            # beam length [m]
    gravity: float = 9.81
    dt: float = 1.0 / 30.0
    servo_tau: float = 0.05        # first-order lag time constant [s]
    cmd_rate_limit: float = 0.15   # commanded-angle change per step [rad]
    camera_noise_std: float = 3e-4  # ball position noise [m]
    encoder_quant: float = TWO_PI / 4096.0  # beam angle quantum [rad]
    substeps: int = 10

    def validate(self) -> None:
        for name in ("mass", "inertia", "radius", "length", "gravity", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.servo_tau <= 0 or self.substeps < 1:
            raise ValueError("servo_tau must be positive and substeps >= 1")


@dataclass
class BBState:
    p: float = 0.0
    p_dot: float = 0.0
    theta: float = 0.0
    theta_dot: float = 0.0


def bb_accel(state: BBState, params: BBParams) -> float:
    """Ball acceleration along the beam."""
    m = params.mass
    return (
        m * (state.p - params.length / 2.0) * state.theta_dot**2
        - m * params.gravity * np.sin(state.theta)
        - params.friction * state.p_dot
    ) / (params.inertia / params.radius**2 + m)


class BallAndBeam:
    """Ball-and-beam plant stepped at the control rate."""

    def __init__(self, params: BBParams, state: BBState | None = None):
        params.validate()
        self.params = params
        self.state = state if state is not None else BBState()
        self._last_cmd = self.state.theta
        self.contact_events = 0

    def reset(self, state: BBState | None = None) -> None:
        self.state = state if state is not None else BBState()
        self._last_cmd = self.state.theta
        self.contact_events = 0

    def step(self, command: float, rng=None, noise: bool = True):
        """Apply one commanded beam angle; returns (measurements, info)."""
        pr = self.params
        inc = np.clip(command - self._last_cmd, -pr.cmd_rate_limit, pr.cmd_rate_limit)
        clamped = bool(abs(command - self._last_cmd) > pr.cmd_rate_limit)
        cmd = self._last_cmd + inc
        self._last_cmd = cmd

        denom = pr.inertia / pr.radius**2 + pr.mass

        def rhs(x):
            p, pd, th = x
            thd = (cmd - th) / pr.servo_tau
            pdd = (
                pr.mass * (p - pr.length / 2.0) * thd**2
                - pr.mass * pr.gravity * np.sin(th)
                - pr.friction * pd
            ) / denom
            return np.array([pd, pdd, thd])

        s = self.state
        x = _rk4(rhs, np.array([s.p, s.p_dot, s.theta]), pr.dt, pr.substeps)
        if not np.all(np.isfinite(x)):
            raise SimulationDiverged("ball-and-beam state diverged")
        p, pd, th = x
        bound = pr.length / 2.0 + pr.radius
        contact = False
        if abs(p) > bound:
            p = np.clip(p, -bound, bound)
            pd = 0.0
            contact = True
            self.contact_events += 1
        self.state = BBState(p, pd, th, (cmd - th) / pr.servo_tau)

        meas_p, meas_th = p, th
        if noise:
            if rng is None:
                raise ValueError("noise requires a random generator")
            meas_p = p + pr.camera_noise_std * rng.standard_normal()
            meas_th = np.round(th / pr.encoder_quant) * pr.encoder_quant
        info = {"clamped": clamped, "contact": contact, "command": cmd}
        return {"p": float(meas_p), "theta": float(meas_th)}, info


def simulate_bb(params: BBParams, commands, seed: int = 0, noise: bool = True,
                initial: BBState | None = None) -> Trajectory:
    """Roll the plant through a command sequence; row k is recorded before
    command k is applied."""
    commands = np.asarray(commands, dtype=float)
    plant = BallAndBeam(params, initial)
    rng = np.random.default_rng(seed)
    T = commands.size
    ch = {k: np.zeros(T) for k in (
        "u", "p", "theta", "p_true", "p_dot_true", "theta_true",
        "theta_dot_true", "contact")}
    meas = _bb_measure(plant.state, params, rng, noise)
    for k, u in enumerate(commands):
        st = plant.state
        ch["u"][k] = u
        ch["p"][k] = meas["p"]
        ch["theta"][k] = meas["theta"]
        ch["p_true"][k] = st.p
        ch["p_dot_true"][k] = st.p_dot
        ch["theta_true"][k] = st.theta
        ch["theta_dot_true"][k] = st.theta_dot
        meas, info = plant.step(u, rng, noise)
        ch["contact"][k] = float(info["contact"])
    return Trajectory(params.dt, ch, {"plant": "bb", "seed": seed, "noise": noise})


def _bb_measure(state: BBState, params: BBParams, rng, noise: bool) -> dict:
    if not noise:
        return {"p": state.p, "theta": state.theta}
    return {
        "p": state.p + params.camera_noise_std * rng.standard_normal(),
        "theta": np.round(state.theta / params.encoder_quant) * params.encoder_quant,
    }


# --- rotary pendulum ---------------------------------------------------------------


@dataclass
class FPParams:
    m1: float = 0.05               # base arm mass [kg]
    m2: float = 0.02               # pendulum arm mass [kg]
    L1: float = 0.10               # base arm length [m]
    L2: float = 0.15               # pendulum arm length [m]
    l1: float = 0.05               # base arm center of mass [m]
    l2: float = 0.075              # pendulum arm center of mass [m]
    J1: float = 4.2e-5             # base arm inertia [kg m^2]
    J2: float = 3.75e-5            # pendulum arm inertia [kg m^2]
    damping: float = -2e-5         # velocity coefficient b2 (negative = dissipative)
    gravity: float = 9.81
    dt: float = 0.0071
    cmd_rate_limit: float = 0.05   # commanded-angle change per step [rad]
    cmd_map: str = "half_diff"     # command-to-arm map for the state channel
    delay_steps: int = 0           # pure actuation delay
    elastic_omega: float = 60.0    # elasticity natural frequency [rad/s]
    elastic_zeta: float = 0.25     # elasticity damping ratio
    encoder_quant: float = TWO_PI / 4096.0
    substeps: int = 10

    @property
    def j2_hat(self) -> float:
        return self.J2 + self.m2 * self.l2**2

    @property
    def j1_hat(self) -> float:
        # stored for completeness; the pendulum-arm dynamics do not use it
        return self.J1 + self.m1 * self.l1**2 + self.m2 * self.L1**2

    def validate(self) -> None:
        for name in ("m1", "m2", "L1", "L2", "l1", "l2", "J1", "J2",
                      "gravity", "dt", "elastic_omega"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.delay_steps < 0:
            raise ValueError("delay must be non-negative")
        if self.cmd_map not in ("half_diff", "identity"):
            raise ValueError(f"unknown command map {self.cmd_map!r}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")


@dataclass
class FPState:
    theta: float = np.pi           # pendulum angle, 0 = upright
    theta_dot: float = 0.0
    alpha_hat: float = 0.0         # base arm angle after the elastic chain
    alpha_hat_dot: float = 0.0


def fp_theta_accel(theta: float, theta_dot: float, alpha_hat_dot: float,
                   alpha_hat_ddot: float, params: FPParams) -> float:
    """Pendulum-arm angular acceleration driven by the base arm motion."""
    j2h = params.j2_hat
    return (
        -alpha_hat_ddot * params.m2 * params.L1 * params.l2 * np.cos(theta)
        + 0.5 * alpha_hat_dot**2 * j2h * np.sin(2.0 * theta)
        + params.damping * theta_dot
        + params.gravity * params.m2 * params.l2 * np.sin(theta)
    ) / j2h


class FurutaPendulum:
    """Commanded-base rotary pendulum stepped at the control rate.

    The wrist tracks the (rate-limited, optionally delayed) commanded angle;
    the base arm follows the wrist through the second-order elastic filter
    and drives the pendulum arm.
    """

    def __init__(self, params: FPParams, state: FPState | None = None,
                 initial_command: float = 0.0):
        params.validate()
        self.params = params
        self.state = state if state is not None else FPState()
        self._last_des = initial_command
        self._queue = deque([initial_command] * (params.delay_steps + 1),
                            maxlen=params.delay_steps + 1)

    def reset(self, state: FPState | None = None, initial_command: float = 0.0) -> None:
        self.state = state if state is not None else FPState()
        self._last_des = initial_command
        self._queue = deque([initial_command] * (self.params.delay_steps + 1),
                            maxlen=self.params.delay_steps + 1)

    def command_map(self, des: float, last_des: float) -> float:
        if self.params.cmd_map == "half_diff":
            return 0.5 * (des - last_des)
        return des

    def step(self, command: float, rng=None, noise: bool = True):
        pr = self.params
        inc = np.clip(command - self._last_des, -pr.cmd_rate_limit, pr.cmd_rate_limit)
        clamped = bool(abs(command - self._last_des) > pr.cmd_rate_limit)
        des = self._last_des + inc
        alpha = self.command_map(des, self._last_des)
        self._last_des = des
        self._queue.append(des)
        wrist = self._queue[0]

        w2 = pr.elastic_omega**2
        two_zw = 2.0 * pr.elastic_zeta * pr.elastic_omega

        def rhs(x):
            th, thd, ah, ahd = x
            ahdd = w2 * (wrist - ah) - two_zw * ahd
            thdd = fp_theta_accel(th, thd, ahd, ahdd, pr)
            return np.array([thd, thdd, ahd, ahdd])

        s = self.state
        x = _rk4(rhs, np.array([s.theta, s.theta_dot, s.alpha_hat, s.alpha_hat_dot]),
                 pr.dt, pr.substeps)
        if not np.all(np.isfinite(x)):
            raise SimulationDiverged("pendulum state diverged")
        self.state = FPState(*x)

        th = self.state.theta
        meas_th = th
        if noise:
            meas_th = np.round(th / pr.encoder_quant) * pr.encoder_quant
        ahdd = w2 * (wrist - self.state.alpha_hat) - two_zw * self.state.alpha_hat_dot
        info = {
            "clamped": clamped,
            "alpha_des": des,
            "wrist": wrist,
            "alpha_hat_ddot": ahdd,
        }
        return {"theta": float(meas_th), "alpha": float(alpha)}, info


def simulate_fp(params: FPParams, commands, seed: int = 0, noise: bool = True,
                initial: FPState | None = None,
                initial_command: float = 0.0) -> Trajectory:
    """Roll the pendulum through a commanded-angle sequence.

    Row k records the pre-step pendulum measurement together with the
    command applied at k and the arm channel derived from it.
    """
    commands = np.asarray(commands, dtype=float)
    plant = FurutaPendulum(params, initial, initial_command)
    T = commands.size
    ch = {k: np.zeros(T) for k in (
        "alpha_des", "alpha", "theta", "theta_true", "theta_dot_true",
        "alpha_hat", "alpha_hat_dot", "alpha_hat_ddot", "clamped")}
    for k, u in enumerate(commands):
        st = plant.state
        th_meas = st.theta
        if noise:
            th_meas = np.round(st.theta / params.encoder_quant) * params.encoder_quant
        ch["theta"][k] = th_meas
        ch["theta_true"][k] = st.theta
        ch["theta_dot_true"][k] = st.theta_dot
        ch["alpha_hat"][k] = st.alpha_hat
        ch["alpha_hat_dot"][k] = st.alpha_hat_dot
        meas, info = plant.step(u, None, noise)
        ch["alpha_des"][k] = info["alpha_des"]
        ch["alpha"][k] = meas["alpha"]
        ch["alpha_hat_ddot"][k] = info["alpha_hat_ddot"]
        ch["clamped"][k] = float(info["clamped"])
    return Trajectory(params.dt, ch, {"plant": "fp", "seed": seed, "noise": noise})


def fp_pendulum_energy(theta, theta_dot, params: FPParams):
    """Total pendulum-arm energy with the base arm frozen (zero at the
    hanging rest would need an offset; this uses the upright as reference)."""
    return (
        0.5 * params.j2_hat * np.asarray(theta_dot) ** 2
        + params.m2 * params.gravity * params.l2 * np.cos(np.asarray(theta))
    )


# --- planner-facing dynamics handles ---------------------------------------------------


class BbPlantDynamics:
    """Pure (state, command) -> next-state map over the true ball dynamics.

    State [p, p_dot, theta]; the command drives the servo lag directly
    (no rate limit, planner bounds live in the optimizer). Side-effect-free.
    """

    def __init__(self, params: BBParams):
        import copy

        self.params = copy.deepcopy(params)
        self.params.cmd_rate_limit = np.inf

    def step(self, x, u):
        plant = BallAndBeam(self.params, BBState(x[0], x[1], x[2], 0.0))
        plant._last_cmd = float(np.atleast_1d(u)[0])
        plant.step(float(np.atleast_1d(u)[0]), noise=False)
        s = plant.state
        return np.array([s.p, s.p_dot, s.theta])

    def step_batch(self, X, U):
        return np.array([self.step(x, u) for x, u in zip(X, U)])


class FpPlantDynamics:
    """Pure map over the pendulum dynamics with the wrist tracking the
    command exactly (no delay); state [theta, theta_dot, alpha_hat,
    alpha_hat_dot]."""

    def __init__(self, params: FPParams):
        import copy

        self.params = copy.deepcopy(params)
        self.params.cmd_rate_limit = np.inf
        self.params.delay_steps = 0

    def step(self, x, u):
        plant = FurutaPendulum(
            self.params, FPState(*np.asarray(x, dtype=float)),
            initial_command=float(np.atleast_1d(u)[0]),
        )
        plant.step(float(np.atleast_1d(u)[0]), noise=False)
        s = plant.state
        return np.array([s.theta, s.theta_dot, s.alpha_hat, s.alpha_hat_dot])

    def step_batch(self, X, U):
        return np.array([self.step(x, u) for x, u in zip(X, U)])


# --- excitation signals ---------------------------------------------------------------


@dataclass
class ExcitationConfig:
    """Sum-of-sinusoids command generator, reproducible from the seed."""

    n_sinusoids: int = 10
    freq_low_hz: float = 0.0
    freq_high_hz: float = 10.0
    amplitude: float = np.deg2rad(5.0)
    duration_s: float = 180.0
    rate_hz: float = 30.0
    seed: int = 0
    phase_low: float = 0.0
    phase_high: float = TWO_PI

    def validate(self) -> None:
        if self.n_sinusoids < 1:
            raise ValueError("need at least one sinusoid")
        if not (0 <= self.freq_low_hz <= self.freq_high_hz):
            raise ValueError("invalid frequency band")
        if self.freq_high_hz >= 0.5 * self.rate_hz:
            raise ValueError("frequency band must stay below the Nyquist rate")
        if self.duration_s <= 0 or self.rate_hz <= 0:
            raise ValueError("duration and rate must be positive")


def gen_excitation(cfg: ExcitationConfig) -> np.ndarray:
    """u(t) = sum_i A_i sin(2 pi f_i t + phi_i), peak-scaled to the amplitude."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_steps = int(round(cfg.duration_s * cfg.rate_hz))
    freqs = rng.uniform(cfg.freq_low_hz, cfg.freq_high_hz, cfg.n_sinusoids)
    phases = rng.uniform(cfg.phase_low, cfg.phase_high, cfg.n_sinusoids)
    amps = rng.uniform(0.5, 1.0, cfg.n_sinusoids)
    t = np.arange(n_steps) / cfg.rate_hz
    u = np.zeros(n_steps)
    for a, f, ph in zip(amps, freqs, phases):
        u += a * np.sin(TWO_PI * f * t + ph)
    peak = np.max(np.abs(u))
    if peak > 0:
        u *= cfg.amplitude / peak
    return u


def gen_triangle(period_s: float, amplitude: float, duration_s: float,
                 rate_hz: float) -> np.ndarray:
    """Symmetric triangular wave; used to expose actuation delay."""
    t = np.arange(int(round(duration_s * rate_hz))) / rate_hz
    phase = (t / period_s) % 1.0
    tri = 4.0 * np.abs(phase - 0.5) - 1.0
    return amplitude * tri


# --- delay diagnostic --------------------------------------------------------------------


@dataclass
class DelayDiagnostic:
    delay_steps: int
    correlation: float
    reliable: bool
    lags: np.ndarray
    correlations: np.ndarray
    contributions: dict = field(default_factory=dict)


def delay_diagnostic(traj: Trajectory, params: FPParams,
                     sg: SavGolConfig | None = None, max_lag: int = 30,
                     min_correlation: float = 0.15) -> DelayDiagnostic:
    """Estimate the actuation delay from a pendulum trajectory.

    Differentiates the measured pendulum angle and the commanded base angle
    with the acausal Savitzky-Golay filter, forms the per-term contributions
    of the arm dynamics, and reports the lag maximizing the correlation
    between the base-acceleration contribution and the realized pendulum
    acceleration. Below ``min_correlation`` the estimate is flagged
    unreliable.
    """
    sg = sg or SavGolConfig()
    theta = np.asarray(traj["theta"], dtype=float)
    cmd = np.asarray(traj["alpha_des"], dtype=float)
    T = theta.size
    if T < max_lag + 5 * sg.window:
        raise ValueError(f"trajectory too short ({T} samples) for lag search {max_lag}")
    th = savitzky_golay(theta, sg, traj.dt)
    al = savitzky_golay(cmd, sg, traj.dt)
    j2h = params.j2_hat
    contributions = {
        "base_accel": -al.acceleration * params.m2 * params.L1 * params.l2
        * np.cos(th.position) / j2h,
        "centrifugal": 0.5 * al.velocity**2 * np.sin(2.0 * th.position),
        "velocity": params.damping * th.velocity / j2h,
        "gravity": params.gravity * params.m2 * params.l2 * np.sin(th.position) / j2h,
    }
    target = th.acceleration
    basis = contributions["base_accel"]
    lags = np.arange(0, max_lag + 1)
    corrs = np.zeros(lags.size)
    for i, lag in enumerate(lags):
        a = basis[: T - lag]
        b = target[lag:]
        sa, sb = a.std(), b.std()
        if sa > 0 and sb > 0:
            corrs[i] = float(np.corrcoef(a, b)[0, 1])
    best = int(np.argmax(corrs))
    peak = float(corrs[best])
    return DelayDiagnostic(
        delay_steps=int(lags[best]),
        correlation=peak,
        reliable=bool(peak >= min_correlation),
        lags=lags,
        correlations=corrs,
        contributions=contributions,
    )
