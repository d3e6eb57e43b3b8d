"""Zero-mean Gaussian process regression with gradient-based training.

One model per output dimension. The regularized kernel matrix is factorized
lazily via Cholesky with jitter escalation; all positive hyperparameters live
in log space so the joint vector (kernel parameters followed by the log noise
variance) is unconstrained.

Models are treated as immutable after construction: training clones the
kernel and returns a new model, so prediction is safe to call from concurrent
callers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernels import InputShapeError, Kernel, _as_matrix

JITTER_BASE = 1e-10
JITTER_RETRIES = 5


class NumericalError(RuntimeError):
    """Factorization failed even after jitter escalation."""


class TrainingError(RuntimeError):
    """Training diverged; carries the last finite iterate."""

    def __init__(self, message, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = list(history) if history is not None else []


@dataclass
class TrainConfig:
    """Hyperparameter optimization settings.

    ``gd`` runs full-batch gradient descent with backtracking step control
    (guarantees a non-increasing loss); ``sgd`` runs plain constant-step
    stochastic gradient descent on rescaled minibatch losses, which is the
    documented approximation used for large training sets.
    """

    optimizer: str = "gd"
    learning_rate: float = 0.05
    minibatch: int = 256
    max_iters: int = 200
    tol: float = 1e-9
    seed: int = 0

    def validate(self, n: int) -> None:
        if self.optimizer not in ("gd", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer == "sgd" and self.minibatch > n:
            raise ValueError(f"minibatch size {self.minibatch} exceeds N={n}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")


@dataclass
class NmllGradient:
    values: np.ndarray
    names: list[str] = field(default_factory=list)
    analytic: bool = True


class GpModel:
    """GP regression model: inputs, targets, kernel and noise variance."""

    def __init__(self, X, y, kernel: Kernel, log_noise_var: float | None = None):
        self.X = _as_matrix(X).copy()
        self.y = np.asarray(y, dtype=float).reshape(-1).copy()
        if self.X.shape[0] != self.y.size:
            raise InputShapeError(
                f"{self.X.shape[0]} inputs but {self.y.size} targets"
            )
        if self.y.size < 1:
            raise InputShapeError("at least one training pair required")
        self.kernel = kernel
        if log_noise_var is None:
            log_noise_var = float(np.log(max(0.1 * np.var(self.y), 1e-12)))
        self.log_noise_var = float(log_noise_var)
        self._factor = None

    # --- parameters -----------------------------------------------------------

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def noise_var(self) -> float:
        return float(np.exp(self.log_noise_var))

    @property
    def hyperparameters(self) -> np.ndarray:
        return np.concatenate([self.kernel.get_params(), [self.log_noise_var]])

    def hyperparameter_names(self) -> list[str]:
        return self.kernel.param_names() + ["log_noise_var"]

    def with_hyperparameters(self, theta) -> "GpModel":
        theta = np.asarray(theta, dtype=float)
        kernel = self.kernel.clone()
        kernel.set_params(theta[:-1])
        return GpModel(self.X, self.y, kernel, float(theta[-1]))

    # --- factorization ----------------------------------------------------------

    def _factorize(self):
        if self._factor is not None:
            return self._factor
        with np.errstate(over="ignore", invalid="ignore"):
            K = self.kernel.gram(self.X)
        if not np.all(np.isfinite(K)):
            raise NumericalError(
                f"kernel matrix contains non-finite values (kernel {self.kernel.describe()})"
            )
        K = 0.5 * (K + K.T)
        n = self.n
        base = JITTER_BASE * max(np.trace(K) / n, 1e-300)
        eye = np.eye(n)
        for attempt in range(JITTER_RETRIES + 1):
            jitter = 0.0 if attempt == 0 else base * 10.0 ** (attempt - 1)
            try:
                L = np.linalg.cholesky(K + (self.noise_var + jitter) * eye)
            except np.linalg.LinAlgError:
                continue
            alpha = cho_solve((L, True), self.y)
            self._factor = (L, alpha, jitter)
            return self._factor
        raise NumericalError(
            "Cholesky factorization failed after jitter escalation "
            f"(kernel {self.kernel.describe()})"
        )

    @property
    def jitter(self) -> float:
        """Jitter added to reach a successful factorization (0 if none)."""
        return self._factorize()[2]

    def _queries(self, queries) -> np.ndarray:
        Q = _as_matrix(queries)
        if Q.shape[1] != self.input_dim:
            raise InputShapeError(
                f"query dimension {Q.shape[1]} != model input dimension {self.input_dim}"
            )
        return Q

    # --- prediction ---------------------------------------------------------------

    def posterior_mean(self, queries) -> np.ndarray:
        Q = self._queries(queries)
        _, alpha, _ = self._factorize()
        return self.kernel.gram(Q, self.X) @ alpha

    def posterior_variance(self, queries) -> np.ndarray:
        Q = self._queries(queries)
        L, _, _ = self._factorize()
        Ks = self.kernel.gram(Q, self.X)
        W = solve_triangular(L, Ks.T, lower=True)
        var = self.kernel.diag(Q) - np.sum(W * W, axis=0)
        return np.maximum(var, 0.0)

    # --- marginal likelihood ---------------------------------------------------------

    def nmll(self) -> float:
        L, alpha, _ = self._factorize()
        return float(
            0.5 * self.y @ alpha
            + np.sum(np.log(np.diag(L)))
            + 0.5 * self.n * np.log(2.0 * np.pi)
        )

    def nmll_gradient(self) -> NmllGradient:
        """Gradient of the NMLL over [kernel parameters..., log noise variance].

        Uses the trace-form contraction when the kernel provides analytic
        derivatives, otherwise central finite differences on the kernel block
        (flagged via ``analytic=False``).
        """
        L, alpha, _ = self._factorize()
        Kinv = cho_solve((L, True), np.eye(self.n))
        M = np.outer(alpha, alpha) - Kinv
        if self.kernel.analytic_derivatives:
            g_kernel = -0.5 * self.kernel.grad_contract(self.X, M)
            analytic = True
        else:
            g_kernel = self._fd_kernel_gradient()
            analytic = False
        g_noise = -0.5 * self.noise_var * (alpha @ alpha - np.trace(Kinv))
        values = np.concatenate([g_kernel, [g_noise]])
        return NmllGradient(values, self.hyperparameter_names(), analytic)

    def _fd_kernel_gradient(self) -> np.ndarray:
        theta = self.kernel.get_params()
        out = np.zeros(theta.size)
        for i in range(theta.size):
            h = 1e-6 * max(1.0, abs(theta[i]))
            tp = np.concatenate([theta, [self.log_noise_var]])
            tp[i] += h
            fp = self.with_hyperparameters(tp).nmll()
            tp[i] -= 2 * h
            fm = self.with_hyperparameters(tp).nmll()
            out[i] = (fp - fm) / (2 * h)
        return out


def train(model: GpModel, cfg: TrainConfig) -> tuple[GpModel, list[float]]:
    """Minimize the NMLL over the model hyperparameters.

    Returns the trained model and the per-iteration loss history (full-data
    NMLL for ``gd``; rescaled minibatch NMLL for ``sgd``).
    """
    cfg.validate(model.n)
    if cfg.optimizer == "gd":
        return _train_gd(model, cfg)
    return _train_sgd(model, cfg)


def _safe_nmll(model: GpModel) -> float:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            value = model.nmll()
    except (NumericalError, FloatingPointError, OverflowError, ValueError,
            np.linalg.LinAlgError):
        return np.inf
    return value if np.isfinite(value) else np.inf


def _train_gd(model: GpModel, cfg: TrainConfig) -> tuple[GpModel, list[float]]:
    current = model.with_hyperparameters(model.hyperparameters)
    f = _safe_nmll(current)
    if not np.isfinite(f):
        raise TrainingError(
            "NMLL not finite at the initial hyperparameters",
            params=model.hyperparameters,
            history=[],
        )
    history = [f]
    lr = cfg.learning_rate
    lr_cap = cfg.learning_rate * 10.0
    for _ in range(cfg.max_iters):
        g = current.nmll_gradient().values
        if not np.all(np.isfinite(g)):
            raise TrainingError(
                "NMLL gradient diverged",
                params=current.hyperparameters,
                history=history,
            )
        accepted = False
        while lr >= 1e-16:
            candidate = current.with_hyperparameters(
                current.hyperparameters - lr * g
            )
            f_cand = _safe_nmll(candidate)
            if f_cand <= f:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            history.append(f)
            break
        decrease = f - f_cand
        current, f = candidate, f_cand
        history.append(f)
        lr = min(lr * 1.5, lr_cap)
        if decrease <= cfg.tol * max(1.0, abs(f)):
            break
    return current, history


def _train_sgd(model: GpModel, cfg: TrainConfig) -> tuple[GpModel, list[float]]:
    rng = np.random.default_rng(cfg.seed)
    scale = model.n / cfg.minibatch
    theta = model.hyperparameters
    last_finite = theta.copy()
    history: list[float] = []
    for _ in range(cfg.max_iters):
        idx = rng.choice(model.n, size=cfg.minibatch, replace=False)
        sub_kernel = model.kernel.clone()
        sub_kernel.set_params(theta[:-1])
        sub = GpModel(model.X[idx], model.y[idx], sub_kernel, float(theta[-1]))
        f_sub = _safe_nmll(sub)
        if not np.isfinite(f_sub):
            raise TrainingError(
                "minibatch NMLL diverged", params=last_finite, history=history
            )
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                g = sub.nmll_gradient().values
        except (NumericalError, ValueError, np.linalg.LinAlgError):
            g = np.full(theta.shape, np.nan)
        if not np.all(np.isfinite(g)):
            raise TrainingError(
                "minibatch NMLL gradient diverged",
                params=last_finite,
                history=history,
            )
        history.append(scale * f_sub)
        last_finite = theta.copy()
        theta = theta - cfg.learning_rate * scale * g
    return model.with_hyperparameters(theta), history
