"""iLQG trajectory optimization over arbitrary discrete dynamics handles.

The dynamics handle is a side-effect-free callable object with
``step(x, u) -> x_next``; handles may additionally provide
``step_batch(X, U)`` for vectorized evaluation, which the finite-difference
linearization exploits. Costs are quadratic: running
0.5 (x - x*)' Q (x - x*) + 0.5 u' R u and terminal 0.5 (x - x*)' Qf (x - x*).

The backward pass regularizes the control Hessian Levenberg-style
(escalating on a failed factorization, relaxing after accepted steps); the
forward pass backtracks over step scales {1, 0.5, ..., 2^-10} and an
iteration is accepted only if the total cost decreases. Control bounds are
enforced by clamping in the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gp import GpModel
from .statespace import (
    KIND_CONTROL,
    KIND_POSITION,
    DfState,
    StateLayout,
)

REG_MIN = 1e-6
REG_MAX = 1e10
LINE_SEARCH_SCALES = 2.0 ** -np.arange(11)


@dataclass
class IlqgProblem:
    dynamics: object
    horizon: int
    x0: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x_target: np.ndarray
    Qf: np.ndarray
    u_min: np.ndarray | None = None
    u_max: np.ndarray | None = None
    u_init: np.ndarray | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.Qf = np.asarray(self.Qf, dtype=float)
        self.x_target = np.asarray(self.x_target, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for name in ("Q", "Qf"):
            W = getattr(self, name)
            if not np.allclose(W, W.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(W)) < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")

    @property
    def n(self) -> int:
        return self.x0.size

    @property
    def m(self) -> int:
        return self.R.shape[0]

    def clamp(self, u: np.ndarray) -> np.ndarray:
        if self.u_min is not None:
            u = np.maximum(u, self.u_min)
        if self.u_max is not None:
            u = np.minimum(u, self.u_max)
        return u

    def running_cost(self, x, u) -> float:
        dx = x - self.x_target
        return 0.5 * float(dx @ self.Q @ dx + u @ self.R @ u)

    def terminal_cost(self, x) -> float:
        dx = x - self.x_target
        return 0.5 * float(dx @ self.Qf @ dx)


@dataclass
class IlqgSolution:
    us: np.ndarray                 # (N, m) nominal controls
    xs: np.ndarray                 # (N+1, n) nominal states
    k_ff: np.ndarray               # (N, m) feedforward terms
    K_fb: np.ndarray               # (N, m, n) feedback gains
    cost_history: list[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    @property
    def final_cost(self) -> float:
        return self.cost_history[-1] if self.cost_history else np.inf


def linearize(dynamics, x, u, rel_step: float = 1e-5):
    """Central finite-difference Jacobians (A, B) of the dynamics handle."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n, m = x.size, u.size
    hx = rel_step * np.maximum(1.0, np.abs(x))
    hu = rel_step * np.maximum(1.0, np.abs(u))

    X = np.tile(x, (2 * (n + m), 1))
    U = np.tile(u, (2 * (n + m), 1))
    for i in range(n):
        X[2 * i, i] += hx[i]
        X[2 * i + 1, i] -= hx[i]
    for j in range(m):
        r = 2 * n + 2 * j
        U[r, j] += hu[j]
        U[r + 1, j] -= hu[j]
    outs = _eval_dynamics(dynamics, X, U)
    if not np.all(np.isfinite(outs)):
        raise FloatingPointError("dynamics returned non-finite values during linearization")
    A = np.empty((n, n))
    B = np.empty((n, m))
    for i in range(n):
        A[:, i] = (outs[2 * i] - outs[2 * i + 1]) / (2 * hx[i])
    for j in range(m):
        r = 2 * n + 2 * j
        B[:, j] = (outs[r] - outs[r + 1]) / (2 * hu[j])
    return A, B


def _eval_dynamics(dynamics, X, U):
    if hasattr(dynamics, "step_batch"):
        return np.asarray(dynamics.step_batch(X, U))
    return np.array([dynamics.step(x, u) for x, u in zip(X, U)])


def _open_loop_rollout(problem: IlqgProblem, us: np.ndarray):
    xs = np.empty((problem.horizon + 1, problem.n))
    xs[0] = problem.x0
    cost = 0.0
    for t in range(problem.horizon):
        cost += problem.running_cost(xs[t], us[t])
        xs[t + 1] = problem.dynamics.step(xs[t], us[t])
        if not np.all(np.isfinite(xs[t + 1])):
            return xs, np.inf
    cost += problem.terminal_cost(xs[-1])
    return xs, cost


def _feedback_rollout(problem, xs_ref, us_ref, k_ff, K_fb, scale):
    xs = np.empty_like(xs_ref)
    us = np.empty_like(us_ref)
    xs[0] = problem.x0
    cost = 0.0
    for t in range(problem.horizon):
        u = us_ref[t] + scale * k_ff[t] + K_fb[t] @ (xs[t] - xs_ref[t])
        us[t] = problem.clamp(u)
        cost += problem.running_cost(xs[t], us[t])
        xs[t + 1] = problem.dynamics.step(xs[t], us[t])
        if not np.all(np.isfinite(xs[t + 1])):
            return xs, us, np.inf
    cost += problem.terminal_cost(xs[-1])
    return xs, us, cost


def _linearize_trajectory(problem, xs, us, rel_step=1e-5):
    """Jacobians along the trajectory, batched into one dynamics call."""
    N, n, m = problem.horizon, problem.n, problem.m
    rows = 2 * (n + m)
    X = np.repeat(xs[:N], rows, axis=0)
    U = np.repeat(us, rows, axis=0)
    hx = rel_step * np.maximum(1.0, np.abs(xs[:N]))
    hu = rel_step * np.maximum(1.0, np.abs(us))
    for t in range(N):
        base = t * rows
        for i in range(n):
            X[base + 2 * i, i] += hx[t, i]
            X[base + 2 * i + 1, i] -= hx[t, i]
        for j in range(m):
            r = base + 2 * n + 2 * j
            U[r, j] += hu[t, j]
            U[r + 1, j] -= hu[t, j]
    outs = _eval_dynamics(problem.dynamics, X, U)
    if not np.all(np.isfinite(outs)):
        raise FloatingPointError("dynamics returned non-finite values during linearization")
    A = np.empty((N, n, n))
    B = np.empty((N, n, m))
    for t in range(N):
        base = t * rows
        for i in range(n):
            A[t, :, i] = (outs[base + 2 * i] - outs[base + 2 * i + 1]) / (2 * hx[t, i])
        for j in range(m):
            r = base + 2 * n + 2 * j
            B[t, :, j] = (outs[r] - outs[r + 1]) / (2 * hu[t, j])
    return A, B


def _backward_pass(problem, xs, us, A, B, reg):
    N, n, m = problem.horizon, problem.n, problem.m
    k_ff = np.empty((N, m))
    K_fb = np.empty((N, m, n))
    dxN = xs[N] - problem.x_target
    Vx = problem.Qf @ dxN
    Vxx = problem.Qf.copy()
    eye_m = np.eye(m)
    for t in range(N - 1, -1, -1):
        dx = xs[t] - problem.x_target
        Qx = problem.Q @ dx + A[t].T @ Vx
        Qu = problem.R @ us[t] + B[t].T @ Vx
        Qxx = problem.Q + A[t].T @ Vxx @ A[t]
        Quu = problem.R + B[t].T @ Vxx @ B[t] + reg * eye_m
        Qux = B[t].T @ Vxx @ A[t]
        try:
            L = np.linalg.cholesky(0.5 * (Quu + Quu.T))
        except np.linalg.LinAlgError:
            return None
        from scipy.linalg import cho_solve

        k = -cho_solve((L, True), Qu)
        K = -cho_solve((L, True), Qux)
        k_ff[t] = k
        K_fb[t] = K
        Vx = Qx + K.T @ Quu @ k + K.T @ Qu + Qux.T @ k
        Vxx = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
        Vxx = 0.5 * (Vxx + Vxx.T)
    return k_ff, K_fb


def solve(problem: IlqgProblem, max_iters: int = 100, tol: float = 1e-6,
          verbose: bool = False) -> IlqgSolution:
    """Iterate linearization, regularized backward pass and line search.

    Terminates on a relative cost change below ``tol`` (converged) or on the
    iteration cap / regularization ceiling (best-so-far, not converged).
    """
    N, m = problem.horizon, problem.m
    us = (
        problem.clamp(np.asarray(problem.u_init, dtype=float).reshape(N, m).copy())
        if problem.u_init is not None
        else np.zeros((N, m))
    )
    xs, cost = _open_loop_rollout(problem, us)
    if not np.isfinite(cost):
        raise FloatingPointError("initial rollout diverged")
    history = [cost]
    k_ff = np.zeros((N, m))
    K_fb = np.zeros((N, m, problem.n))
    reg = 0.0
    converged = False
    iterations = 0
    while iterations < max_iters:
        iterations += 1
        A, B = _linearize_trajectory(problem, xs, us)
        bp = None
        while bp is None:
            bp = _backward_pass(problem, xs, us, A, B, reg)
            if bp is None:
                reg = max(reg * 10.0, REG_MIN)
                if reg > REG_MAX:
                    return IlqgSolution(us, xs, k_ff, K_fb, history, False, iterations)
        k_ff, K_fb = bp
        accepted = False
        for scale in LINE_SEARCH_SCALES:
            xs_new, us_new, cost_new = _feedback_rollout(
                problem, xs, us, k_ff, K_fb, scale
            )
            if cost_new < cost:
                accepted = True
                break
        if not accepted:
            reg = max(reg * 10.0, REG_MIN)
            if reg > REG_MAX:
                break
            continue
        decrease = cost - cost_new
        xs, us, cost = xs_new, us_new, cost_new
        history.append(cost)
        reg = 0.0 if reg <= REG_MIN else reg / 10.0
        if verbose:
            print(f"iLQG iter {iterations}: cost {cost:.6g} (scale {scale:g})")
        if decrease <= tol * max(1.0, abs(cost)):
            converged = True
            break
    return IlqgSolution(us, xs, k_ff, K_fb, history, converged, iterations)


# --- dynamics handles over learned models ------------------------------------------


class BbGpDynamics:
    """Planner dynamics for the ball-and-beam over a learned increment model.

    State: [p history (kp+1), beam-angle history (kp+1)], newest first.
    Control: commanded beam angle, assumed realized at the next step. The
    handle is pure; every call prices one model evaluation.
    """

    def __init__(self, model: GpModel, kp: int):
        self.model = model
        self.kp = kp
        self.n = 2 * (kp + 1)

    def step(self, x, u):
        return self.step_batch(np.asarray(x, dtype=float)[None, :],
                               np.atleast_2d(u))[0]

    def step_batch(self, X, U):
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float).reshape(X.shape[0], -1)
        h = self.kp + 1
        dp = self.model.posterior_mean(X)
        out = np.empty_like(X)
        out[:, 0] = X[:, 0] + dp
        out[:, 1:h] = X[:, : h - 1]
        out[:, h] = U[:, 0]
        out[:, h + 1 :] = X[:, h : 2 * h - 1]
        return out


class FpGpDynamics:
    """Planner dynamics for the pendulum arm over a learned increment model.

    State: [theta history (kp+1), arm-channel history without the current
    sample (kp), previous commanded angle], so the current arm sample — which
    depends on the command being chosen — is produced inside the step. The
    model input is assembled in the derivative-free layout order
    [theta history, arm history, lagged command].
    """

    def __init__(self, model: GpModel, kp: int, cmd_map: str = "half_diff"):
        self.model = model
        self.kp = kp
        self.cmd_map = cmd_map
        self.n = 2 * kp + 2

    def _alpha(self, u, des_prev):
        if self.cmd_map == "half_diff":
            return 0.5 * (u - des_prev)
        return u

    def step(self, x, u):
        return self.step_batch(np.asarray(x, dtype=float)[None, :],
                               np.atleast_2d(u))[0]

    def step_batch(self, X, U):
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float).reshape(X.shape[0], -1)
        h = self.kp + 1
        theta_hist = X[:, :h]
        alpha_lagged = X[:, h : h + self.kp]
        des_prev = X[:, -1]
        u = U[:, 0]
        alpha_new = self._alpha(u, des_prev)
        gp_in = np.concatenate(
            [theta_hist, alpha_new[:, None], alpha_lagged, des_prev[:, None]],
            axis=1,
        )
        dth = self.model.posterior_mean(gp_in)
        out = np.empty_like(X)
        out[:, 0] = theta_hist[:, 0] + dth
        out[:, 1:h] = theta_hist[:, :-1]
        out[:, h] = alpha_new
        out[:, h + 1 : h + self.kp] = alpha_lagged[:, :-1]
        out[:, -1] = u
        return out

    def planner_state(self, theta0: float, kp_fill: float | None = None) -> np.ndarray:
        """Rest state: constant pendulum history, arm at zero."""
        fill = theta0 if kp_fill is None else kp_fill
        x = np.zeros(self.n)
        x[: self.kp + 1] = fill
        x[0] = theta0
        return x

    def state_from_df(self, state: DfState, des_prev: float) -> np.ndarray:
        # drop the newest arm sample: the step regenerates it from the command
        th = state.histories["theta"]
        al = state.histories["alpha"]
        return np.concatenate([th, al[1:], [des_prev]])


# --- model rollouts ---------------------------------------------------------------------


def rollout_model(models: dict[str, GpModel], layout: StateLayout, init,
                  exogenous: dict[str, np.ndarray], steps: int) -> dict[str, np.ndarray]:
    """Iterated model prediction from an initial derivative-free state.

    ``models`` maps each predicted coordinate to its increment model;
    every other layout channel (remaining position channels and command
    channels) must appear in ``exogenous`` as the per-step values to insert.
    Accepts a single DfState or a list of them; returns, per predicted
    coordinate, the predicted positions one to ``steps`` ahead with shape
    (batch, steps) (squeezed to (steps,) for a single state).
    """
    single = isinstance(init, DfState)
    states = [init] if single else list(init)
    X = np.stack([s.vector(layout) for s in states])
    B = X.shape[0]
    exo = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in exogenous.items()}
    for k, v in exo.items():
        if v.shape[0] == 1 and B > 1:
            exo[k] = np.repeat(v, B, axis=0)
        if exo[k].shape[1] < steps:
            raise ValueError(f"exogenous channel {k!r} shorter than the rollout")
    preds = {v: np.empty((B, steps)) for v in models}
    pos_slices = [s for s in layout.slices if s.kind == KIND_POSITION]
    ctrl_slices = [s for s in layout.slices if s.kind == KIND_CONTROL]
    for s in pos_slices:
        if s.var not in models and s.var not in exo:
            raise ValueError(f"channel {s.var!r} is neither modeled nor exogenous")
    for s in ctrl_slices:
        if s.var not in exo:
            raise ValueError(f"command channel {s.var!r} must be exogenous")
    for j in range(steps):
        new_vals = {}
        for var, model in models.items():
            delta = model.posterior_mean(X)
            cur = X[:, layout.indices(var)[0]]
            new_vals[var] = cur + delta
            preds[var][:, j] = new_vals[var]
        X_next = np.empty_like(X)
        for s in pos_slices:
            idx = list(s.indices)
            val = new_vals[s.var] if s.var in models else exo[s.var][:, j]
            X_next[:, idx[0]] = val
            X_next[:, idx[1:]] = X[:, idx[:-1]]
        for s in ctrl_slices:
            idx = list(s.indices)
            X_next[:, idx[0]] = exo[s.var][:, j]
            X_next[:, idx[1:]] = X[:, idx[:-1]]
        X = X_next
    if single:
        return {v: p[0] for v, p in preds.items()}
    return preds
