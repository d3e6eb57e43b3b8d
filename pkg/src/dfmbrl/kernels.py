"""Composable covariance functions over sliced state vectors.

A kernel is a tree of nodes: feature-based leaves (linear-in-features,
homogeneous polynomial, RBF) combined by sum and product nodes. Every leaf
consumes a selection of the input columns, optionally transformed
elementwise. This is how physical structure over position histories is
expressed: each term of a physical model becomes a polynomial kernel over
the history of the coordinate it involves, transformed the same way the
physics transforms that coordinate.

All nodes expose a flat, named hyperparameter vector. Positive quantities
(scaling factors, metric diagonals, Cholesky diagonals) are stored in log
space so the vector is unconstrained. Kernel evaluation is pure; training
code clones the tree before updating parameters.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

TRANSFORMS = {
    "identity": lambda x: x,
    "sin": np.sin,
    "cos": np.cos,
    "sin2": lambda x: np.sin(2.0 * x),
}


class InputShapeError(ValueError):
    """Inputs do not match the layout a kernel or model expects."""


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise InputShapeError(f"expected a row-stacked 2-d input, got shape {X.shape}")
    return X


class Selector:
    """Column selection plus elementwise transform of the full input row."""

    def __init__(self, indices, transform: str = "identity", name: str = "x"):
        self.indices = np.atleast_1d(np.asarray(indices, dtype=int))
        if self.indices.size == 0:
            raise ValueError("selector needs at least one column")
        if np.any(self.indices < 0):
            raise ValueError("selector indices must be non-negative")
        if transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {transform!r}")
        self.transform = transform
        self.name = name

    @property
    def dim(self) -> int:
        return int(self.indices.size)

    @property
    def max_column(self) -> int:
        return int(self.indices.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] <= self.max_column:
            raise InputShapeError(
                f"selector {self.describe()!r} needs column {self.max_column}, "
                f"input has {X.shape[1]} columns"
            )
        return TRANSFORMS[self.transform](X[:, self.indices])

    def describe(self) -> str:
        if self.transform == "identity":
            return self.name
        return f"{self.transform}({self.name})"

    def to_dict(self) -> dict:
        return {
            "type": "slice",
            "indices": [int(i) for i in self.indices],
            "transform": self.transform,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Selector":
        return cls(d["indices"], d["transform"], d["name"])


@dataclass(frozen=True)
class FeatureFactor:
    """One multiplicative factor of a physics feature term.

    ``order`` is the derivative order as written in the physics (0 position,
    1 velocity, 2 acceleration); ``power`` the exponent of the factor.
    """

    var: str
    order: int
    power: int = 1
    transform: str = "identity"

    def __post_init__(self):
        if self.order not in (0, 1, 2):
            raise ValueError(f"derivative order must be 0, 1 or 2, got {self.order}")
        if self.power < 1:
            raise ValueError(f"factor power must be >= 1, got {self.power}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")


class FeatureMapSpec:
    """A physics feature map: a list of terms, each a product of factors."""

    def __init__(self, terms):
        self.terms = tuple(tuple(term) for term in terms)
        if not self.terms:
            raise ValueError("feature map needs at least one term")
        for term in self.terms:
            if not term:
                raise ValueError("feature term needs at least one factor")
            for f in term:
                if not isinstance(f, FeatureFactor):
                    raise TypeError("terms must contain FeatureFactor entries")

    def variables(self) -> set[str]:
        return {f.var for term in self.terms for f in term}

    def to_config(self) -> list:
        return [
            [
                {"var": f.var, "order": f.order, "power": f.power, "transform": f.transform}
                for f in term
            ]
            for term in self.terms
        ]

    @classmethod
    def from_config(cls, raw: list) -> "FeatureMapSpec":
        terms = []
        for term in raw:
            factors = []
            for f in term:
                unknown = set(f) - {"var", "order", "power", "transform"}
                if unknown:
                    raise ValueError(f"unknown feature factor keys: {sorted(unknown)}")
                factors.append(
                    FeatureFactor(
                        var=f["var"],
                        order=int(f.get("order", 0)),
                        power=int(f.get("power", 1)),
                        transform=f.get("transform", "identity"),
                    )
                )
            terms.append(factors)
        return cls(terms)


class PhysicsFeatureMap:
    """Evaluates a physics feature map over rows of a derivative-based state.

    ``columns`` maps (variable, derivative order) to the column index that
    holds the current-time value of that signal.
    """

    def __init__(self, spec: FeatureMapSpec, columns: dict, name: str = "phi"):
        self.spec = spec
        self.columns = dict(columns)
        self.name = name
        for term in spec.terms:
            for f in term:
                if (f.var, f.order) not in self.columns:
                    raise ValueError(
                        f"feature map references ({f.var!r}, order {f.order}) "
                        "which the state layout does not provide"
                    )

    @property
    def dim(self) -> int:
        return len(self.spec.terms)

    @property
    def max_column(self) -> int:
        return max(self.columns[(f.var, f.order)] for t in self.spec.terms for f in t)

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] <= self.max_column:
            raise InputShapeError(
                f"feature map {self.name!r} needs column {self.max_column}, "
                f"input has {X.shape[1]} columns"
            )
        cols = []
        for term in self.spec.terms:
            val = np.ones(X.shape[0])
            for f in term:
                sig = TRANSFORMS[f.transform](X[:, self.columns[(f.var, f.order)]])
                val = val * sig**f.power
            cols.append(val)
        return np.stack(cols, axis=1)

    def describe(self) -> str:
        return f"{self.name}[{self.dim}]"

    def to_dict(self) -> dict:
        return {
            "type": "physics",
            "spec": self.spec.to_config(),
            "columns": {f"{v}:{o}": int(c) for (v, o), c in self.columns.items()},
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicsFeatureMap":
        columns = {}
        for key, col in d["columns"].items():
            var, order = key.rsplit(":", 1)
            columns[(var, int(order))] = int(col)
        return cls(FeatureMapSpec.from_config(d["spec"]), columns, d["name"])


def _features_from_dict(d: dict):
    if d["type"] == "slice":
        return Selector.from_dict(d)
    if d["type"] == "physics":
        return PhysicsFeatureMap.from_dict(d)
    raise ValueError(f"unknown feature extractor type {d['type']!r}")


class MetricParam:
    """Parameterized PSD metric matrix, diagonal or full via Cholesky factor.

    Diagonal: entries stored as log of the diagonal of the realized matrix.
    Full Cholesky: lower-triangular factor L with the diagonal stored in log
    space (row-major lower-triangular order), realizing Sigma = L L^T.
    """

    DIAGONAL = "diagonal"
    FULL_CHOLESKY = "full_cholesky"

    def __init__(self, kind: str, dim: int, theta=None):
        if kind not in (self.DIAGONAL, self.FULL_CHOLESKY):
            raise ValueError(f"unknown metric kind {kind!r}")
        if dim < 1:
            raise ValueError("metric dimension must be >= 1")
        self.kind = kind
        self.dim = dim
        n = dim if kind == self.DIAGONAL else dim * (dim + 1) // 2
        if theta is None:
            theta = np.zeros(n)
        self.theta = np.asarray(theta, dtype=float).copy()
        if self.theta.shape != (n,):
            raise ValueError(f"metric expects {n} parameters, got {self.theta.shape}")
        if kind == self.FULL_CHOLESKY:
            self._rows, self._cols = np.tril_indices(dim)

    @property
    def n_params(self) -> int:
        return self.theta.size

    def param_names(self) -> list[str]:
        if self.kind == self.DIAGONAL:
            return [f"log_diag[{a}]" for a in range(self.dim)]
        names = []
        for a, b in zip(self._rows, self._cols):
            names.append(f"log_L[{a},{a}]" if a == b else f"L[{a},{b}]")
        return names

    def factor(self) -> np.ndarray:
        """Lower-triangular L with Sigma = L L^T."""
        if self.kind == self.DIAGONAL:
            return np.diag(np.exp(0.5 * self.theta))
        L = np.zeros((self.dim, self.dim))
        L[self._rows, self._cols] = self.theta
        d = np.arange(self.dim)
        L[d, d] = np.exp(self.theta[self._diag_positions()])
        return L

    def matrix(self) -> np.ndarray:
        L = self.factor()
        return L @ L.T

    def _diag_positions(self) -> np.ndarray:
        return np.flatnonzero(self._rows == self._cols)

    def init_from_scales(self, scales: np.ndarray) -> None:
        """Set Sigma diagonal to scales**2 with zero off-diagonal coupling."""
        scales = np.asarray(scales, dtype=float)
        if scales.shape != (self.dim,):
            raise ValueError("one scale per metric dimension required")
        scales = np.maximum(scales, 1e-12)
        if self.kind == self.DIAGONAL:
            self.theta = 2.0 * np.log(scales)
        else:
            self.theta = np.zeros(self.n_params)
            self.theta[self._diag_positions()] = np.log(scales)

    # --- derivative helpers -------------------------------------------------
    # S-form kernels use S = A Sigma B^T with U = A L, V = B L.
    # D-form kernels use D_ij = ||(a_i - b_j) L||^2 on raw selected features.

    def s_derivs(self, A, B, U, V):
        """Yield dS/dtheta matrices, in parameter order."""
        if self.kind == self.DIAGONAL:
            d = np.exp(self.theta)
            for a in range(self.dim):
                yield d[a] * np.outer(A[:, a], B[:, a])
        else:
            L = self.factor()
            for a, b in zip(self._rows, self._cols):
                dS = np.outer(A[:, a], V[:, b]) + np.outer(U[:, b], B[:, a])
                if a == b:
                    dS *= L[a, a]
                yield dS

    def s_contract(self, A, B, U, V, P) -> np.ndarray:
        """Gradient of sum_ij P_ij S_ij with respect to theta."""
        if self.kind == self.DIAGONAL:
            return np.exp(self.theta) * np.sum(A * (P @ B), axis=0)
        G = A.T @ P @ V + B.T @ P.T @ U
        return self._flatten_factor_grad(G)

    def d_derivs(self, A, B, U, V):
        """Yield dD/dtheta matrices for squared distances D."""
        if self.kind == self.DIAGONAL:
            d = np.exp(self.theta)
            for a in range(self.dim):
                delta = A[:, a, None] - B[None, :, a]
                yield d[a] * delta**2
        else:
            L = self.factor()
            for a, b in zip(self._rows, self._cols):
                delta = A[:, a, None] - B[None, :, a]
                w = U[:, b, None] - V[None, :, b]
                dD = 2.0 * delta * w
                if a == b:
                    dD *= L[a, a]
                yield dD

    def d_contract(self, A, B, U, V, Q) -> np.ndarray:
        """Gradient of sum_ij Q_ij D_ij with respect to theta."""
        if self.kind == self.DIAGONAL:
            q1 = Q.sum(axis=1)
            q0 = Q.sum(axis=0)
            g = (
                np.sum(A**2 * q1[:, None], axis=0)
                - 2.0 * np.sum(A * (Q @ B), axis=0)
                + np.sum(B**2 * q0[:, None], axis=0)
            )
            return np.exp(self.theta) * g
        q1 = Q.sum(axis=1)
        q0 = Q.sum(axis=0)
        G = 2.0 * (
            A.T @ (U * q1[:, None])
            - A.T @ (Q @ V)
            - B.T @ (Q.T @ U)
            + B.T @ (V * q0[:, None])
        )
        return self._flatten_factor_grad(G)

    def _flatten_factor_grad(self, G: np.ndarray) -> np.ndarray:
        L = self.factor()
        g = G[self._rows, self._cols].astype(float).copy()
        diag = self._diag_positions()
        g[diag] *= np.diag(L)
        return g

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "theta": [float(t) for t in self.theta]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricParam":
        return cls(d["kind"], d["dim"], d["theta"])


class Kernel:
    """Base class for kernel tree nodes."""

    node = "kernel"
    analytic_derivatives = True
    children: tuple = ()

    def __init__(self, input_dim: int | None = None):
        self.input_dim = input_dim

    # --- parameters ---------------------------------------------------------

    def _own_params(self) -> np.ndarray:
        return np.zeros(0)

    def _set_own_params(self, theta: np.ndarray) -> None:
        if theta.size:
            raise ValueError("node takes no parameters")

    def _own_param_names(self) -> list[str]:
        return []

    @property
    def n_params(self) -> int:
        return self._own_params().size + sum(c.n_params for c in self.children)

    def get_params(self) -> np.ndarray:
        parts = [self._own_params()] + [c.get_params() for c in self.children]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        n0 = self._own_params().size
        self._set_own_params(theta[:n0])
        ofs = n0
        for c in self.children:
            c.set_params(theta[ofs : ofs + c.n_params])
            ofs += c.n_params

    def param_names(self, prefix: str = "") -> list[str]:
        names = [prefix + n for n in self._own_param_names()]
        for i, c in enumerate(self.children):
            names.extend(c.param_names(f"{prefix}{self.node}.{i}."))
        return names

    # --- evaluation ---------------------------------------------------------

    def gram(self, X, Z=None) -> np.ndarray:
        raise NotImplementedError

    def diag(self, X) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, X, Z=None) -> np.ndarray:
        return self.gram(X, Z)

    # --- derivatives --------------------------------------------------------

    def gram_derivs(self, X) -> list[np.ndarray]:
        """Matrices d gram(X, X) / d theta, in parameter order."""
        raise NotImplementedError

    def grad_contract(self, X, M) -> np.ndarray:
        """Vector of sum_ij M_ij dK_ij/dtheta without materializing dK."""
        return np.array([float(np.sum(M * dK)) for dK in self.gram_derivs(X)])

    # --- structure ----------------------------------------------------------

    def leaves(self):
        if self.children:
            for c in self.children:
                yield from c.leaves()
        else:
            yield self

    def describe(self):
        raise NotImplementedError

    @property
    def max_column(self) -> int:
        return max(leaf.features.max_column for leaf in self.leaves())

    def clone(self) -> "Kernel":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        raise NotImplementedError


class PolynomialKernel(Kernel):
    """Homogeneous polynomial kernel (phi(x)^T Sigma phi(z))^p over features."""

    node = "poly"

    def __init__(self, degree: int, features, metric: MetricParam | None = None,
                 input_dim: int | None = None):
        super().__init__(input_dim)
        if int(degree) < 1:
            raise ValueError(
                "polynomial degree must be >= 1 (a degree-0 kernel is a "
                "constant; model constants explicitly instead)"
            )
        self.degree = int(degree)
        self.features = features
        self.metric = metric if metric is not None else MetricParam(
            MetricParam.FULL_CHOLESKY, features.dim
        )
        if self.metric.dim != features.dim:
            raise ValueError("metric dimension must match feature dimension")

    def _own_params(self) -> np.ndarray:
        return self.metric.theta.copy()

    def _set_own_params(self, theta: np.ndarray) -> None:
        self.metric.theta = theta.copy()

    def _own_param_names(self) -> list[str]:
        tag = self.describe_leaf()
        return [f"{tag}.{n}" for n in self.metric.param_names()]

    def describe_leaf(self) -> str:
        return f"{self.node}{self.degree}({self.features.describe()})"

    def _uv(self, X, Z):
        A = self.features.apply(X)
        L = self.metric.factor()
        U = A @ L
        if Z is None:
            return A, A, U, U
        B = self.features.apply(Z)
        return A, B, U, B @ L

    def gram(self, X, Z=None) -> np.ndarray:
        _, _, U, V = self._uv(X, Z)
        S = U @ V.T
        return S**self.degree

    def diag(self, X) -> np.ndarray:
        A = self.features.apply(X)
        U = A @ self.metric.factor()
        return np.sum(U * U, axis=1) ** self.degree

    def _weight(self, S: np.ndarray) -> np.ndarray:
        if self.degree == 1:
            return np.ones_like(S)
        return self.degree * S ** (self.degree - 1)

    def gram_derivs(self, X) -> list[np.ndarray]:
        A, B, U, V = self._uv(X, None)
        S = U @ V.T
        w = self._weight(S)
        return [w * dS for dS in self.metric.s_derivs(A, B, U, V)]

    def grad_contract(self, X, M) -> np.ndarray:
        A, B, U, V = self._uv(X, None)
        S = U @ V.T
        P = M * self._weight(S)
        return self.metric.s_contract(A, B, U, V, P)

    def describe(self):
        return (self.node, self.degree, self.features.describe())

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "degree": self.degree,
            "features": self.features.to_dict(),
            "metric": self.metric.to_dict(),
            "input_dim": self.input_dim,
        }


class LinearFeatureKernel(PolynomialKernel):
    """Linear kernel in a feature map: phi(x)^T Sigma phi(z)."""

    node = "linear"

    def __init__(self, features, metric: MetricParam | None = None,
                 input_dim: int | None = None):
        super().__init__(1, features, metric, input_dim)

    def describe(self):
        return (self.node, self.features.describe())

    def to_dict(self) -> dict:
        d = super().to_dict()
        del d["degree"]
        return d


class RbfKernel(Kernel):
    """RBF kernel lambda * exp(-0.5 ||phi(x) - phi(z)||^2_Sigma)."""

    node = "rbf"

    def __init__(self, selector, metric: MetricParam | None = None,
                 log_scale: float = 0.0, input_dim: int | None = None):
        super().__init__(input_dim)
        self.features = selector
        self.metric = metric if metric is not None else MetricParam(
            MetricParam.DIAGONAL, selector.dim
        )
        if self.metric.dim != selector.dim:
            raise ValueError("metric dimension must match selector dimension")
        self.log_scale = float(log_scale)

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale))

    def _own_params(self) -> np.ndarray:
        return np.concatenate([[self.log_scale], self.metric.theta])

    def _set_own_params(self, theta: np.ndarray) -> None:
        self.log_scale = float(theta[0])
        self.metric.theta = theta[1:].copy()

    def _own_param_names(self) -> list[str]:
        tag = f"rbf({self.features.describe()})"
        return [f"{tag}.log_scale"] + [f"{tag}.{n}" for n in self.metric.param_names()]

    def _uv(self, X, Z):
        A = self.features.apply(X)
        L = self.metric.factor()
        U = A @ L
        if Z is None:
            return A, A, U, U
        B = self.features.apply(Z)
        return A, B, U, B @ L

    @staticmethod
    def _sqdist(U, V, symmetric: bool) -> np.ndarray:
        su = np.sum(U * U, axis=1)
        sv = su if symmetric else np.sum(V * V, axis=1)
        D = su[:, None] + sv[None, :] - 2.0 * (U @ V.T)
        np.maximum(D, 0.0, out=D)
        if symmetric:
            np.fill_diagonal(D, 0.0)
        return D

    def gram(self, X, Z=None) -> np.ndarray:
        _, _, U, V = self._uv(X, Z)
        D = self._sqdist(U, V, Z is None)
        return np.exp(self.log_scale - 0.5 * D)

    def diag(self, X) -> np.ndarray:
        X = self.features.apply(X)
        return np.full(X.shape[0], self.scale)

    def gram_derivs(self, X) -> list[np.ndarray]:
        A, B, U, V = self._uv(X, None)
        D = self._sqdist(U, V, True)
        K = np.exp(self.log_scale - 0.5 * D)
        derivs = [K.copy()]
        derivs.extend(-0.5 * K * dD for dD in self.metric.d_derivs(A, B, U, V))
        return derivs

    def grad_contract(self, X, M) -> np.ndarray:
        A, B, U, V = self._uv(X, None)
        D = self._sqdist(U, V, True)
        K = np.exp(self.log_scale - 0.5 * D)
        g_scale = float(np.sum(M * K))
        Q = -0.5 * (M * K)
        return np.concatenate([[g_scale], self.metric.d_contract(A, B, U, V, Q)])

    def describe(self):
        return (self.node, self.features.describe())

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "features": self.features.to_dict(),
            "metric": self.metric.to_dict(),
            "log_scale": self.log_scale,
            "input_dim": self.input_dim,
        }


def _check_child_dims(children, input_dim):
    dims = {c.input_dim for c in children if c.input_dim is not None}
    if input_dim is not None:
        dims.add(input_dim)
    if len(dims) > 1:
        raise InputShapeError(f"children declare incompatible input layouts: {sorted(dims)}")
    return dims.pop() if dims else None


class SumKernel(Kernel):
    """Sum of kernels. An empty sum is the zero kernel."""

    node = "sum"

    def __init__(self, children, input_dim: int | None = None):
        super().__init__(_check_child_dims(children, input_dim))
        self.children = tuple(children)

    def gram(self, X, Z=None) -> np.ndarray:
        X = _as_matrix(X)
        m = X.shape[0] if Z is None else _as_matrix(Z).shape[0]
        K = np.zeros((X.shape[0], m))
        for c in self.children:
            K += c.gram(X, Z)
        return K

    def diag(self, X) -> np.ndarray:
        X = _as_matrix(X)
        v = np.zeros(X.shape[0])
        for c in self.children:
            v += c.diag(X)
        return v

    def gram_derivs(self, X) -> list[np.ndarray]:
        out = []
        for c in self.children:
            out.extend(c.gram_derivs(X))
        return out

    def grad_contract(self, X, M) -> np.ndarray:
        parts = [c.grad_contract(X, M) for c in self.children]
        return np.concatenate(parts) if parts else np.zeros(0)

    def describe(self):
        return (self.node,) + tuple(c.describe() for c in self.children)

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "children": [c.to_dict() for c in self.children],
            "input_dim": self.input_dim,
        }


class ProductKernel(Kernel):
    """Elementwise product of kernels."""

    node = "product"

    def __init__(self, children, input_dim: int | None = None):
        if len(children) < 1:
            raise ValueError("product kernel needs at least one child")
        super().__init__(_check_child_dims(children, input_dim))
        self.children = tuple(children)

    def gram(self, X, Z=None) -> np.ndarray:
        K = self.children[0].gram(X, Z)
        for c in self.children[1:]:
            K = K * c.gram(X, Z)
        return K

    def diag(self, X) -> np.ndarray:
        v = self.children[0].diag(X)
        for c in self.children[1:]:
            v = v * c.diag(X)
        return v

    def _child_grams(self, X):
        return [c.gram(X) for c in self.children]

    def _others_product(self, grams):
        n = len(grams)
        rest = []
        for i in range(n):
            P = None
            for j in range(n):
                if j == i:
                    continue
                P = grams[j].copy() if P is None else P * grams[j]
            rest.append(P if P is not None else np.ones_like(grams[0]))
        return rest

    def gram_derivs(self, X) -> list[np.ndarray]:
        grams = self._child_grams(X)
        rest = self._others_product(grams)
        out = []
        for i, c in enumerate(self.children):
            out.extend(rest[i] * dK for dK in c.gram_derivs(X))
        return out

    def grad_contract(self, X, M) -> np.ndarray:
        grams = self._child_grams(X)
        rest = self._others_product(grams)
        parts = [c.grad_contract(X, M * rest[i]) for i, c in enumerate(self.children)]
        return np.concatenate(parts)

    def describe(self):
        return (self.node,) + tuple(c.describe() for c in self.children)

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "children": [c.to_dict() for c in self.children],
            "input_dim": self.input_dim,
        }


_NODE_CLASSES = {
    "poly": PolynomialKernel,
    "linear": LinearFeatureKernel,
    "rbf": RbfKernel,
    "sum": SumKernel,
    "product": ProductKernel,
}


def kernel_from_dict(d: dict) -> Kernel:
    node = d["node"]
    if node == "sum":
        return SumKernel([kernel_from_dict(c) for c in d["children"]], d.get("input_dim"))
    if node == "product":
        return ProductKernel([kernel_from_dict(c) for c in d["children"]], d.get("input_dim"))
    feats = _features_from_dict(d["features"])
    metric = MetricParam.from_dict(d["metric"])
    if node == "poly":
        return PolynomialKernel(d["degree"], feats, metric, d.get("input_dim"))
    if node == "linear":
        return LinearFeatureKernel(feats, metric, d.get("input_dim"))
    if node == "rbf":
        return RbfKernel(feats, metric, d["log_scale"], d.get("input_dim"))
    raise ValueError(f"unknown kernel node {node!r}")


def kernel_derivatives(kernel: Kernel, X) -> list[np.ndarray]:
    """Per-hyperparameter derivative matrices of the training Gram matrix.

    Falls back to central finite differences for kernels without analytic
    derivatives (step 1e-6 * max(1, |theta|) per parameter).
    """
    X = _as_matrix(X)
    if kernel.analytic_derivatives:
        return kernel.gram_derivs(X)
    theta = kernel.get_params()
    work = kernel.clone()
    out = []
    for i in range(theta.size):
        h = 1e-6 * max(1.0, abs(theta[i]))
        tp = theta.copy()
        tp[i] += h
        work.set_params(tp)
        Kp = work.gram(X)
        tp[i] -= 2 * h
        work.set_params(tp)
        Km = work.gram(X)
        out.append((Kp - Km) / (2 * h))
    work.set_params(theta)
    return out


# --- physics-to-kernel compilation -----------------------------------------


def compile_physics_kernel(spec: FeatureMapSpec, histories: dict,
                           input_dim: int | None = None) -> SumKernel:
    """Turn a physics feature map into a derivative-free kernel.

    Each factor (variable, derivative order, power p, transform g) becomes a
    polynomial kernel of degree exactly p over the position history of its
    variable, with g applied elementwise to the history. Factors multiplying
    each other within a term become a product of kernels; the terms sum.
    Every generated polynomial kernel owns a distinct full-Cholesky metric.

    ``histories`` maps variable name to the column indices of its position
    history (newest first) in the derivative-free state vector.
    """
    terms = []
    for term in spec.terms:
        factors = []
        for f in term:
            if f.var not in histories:
                raise ValueError(
                    f"feature map references unknown variable {f.var!r}; "
                    f"histories provide {sorted(histories)}"
                )
            sel = Selector(histories[f.var], f.transform, name=f.var)
            factors.append(PolynomialKernel(f.power, sel))
        terms.append(factors[0] if len(factors) == 1 else ProductKernel(factors))
    return SumKernel(terms, input_dim=input_dim)


def semiparametric(physics: Kernel, nonparametric: Kernel) -> SumKernel:
    """Sum of a physics-structured kernel and a nonparametric kernel."""
    if (
        physics.input_dim is not None
        and nonparametric.input_dim is not None
        and physics.input_dim != nonparametric.input_dim
    ):
        raise InputShapeError(
            f"kernel layouts differ: {physics.input_dim} vs {nonparametric.input_dim}"
        )
    return SumKernel([physics, nonparametric])


def bb_feature_spec() -> FeatureMapSpec:
    """Ball-and-beam feature map: [p*thd^2, thd^2, sin(theta), pd]."""
    return FeatureMapSpec(
        [
            [FeatureFactor("p", 0, 1), FeatureFactor("theta", 1, 2)],
            [FeatureFactor("theta", 1, 2)],
            [FeatureFactor("theta", 0, 1, "sin")],
            [FeatureFactor("p", 1, 1)],
        ]
    )


def fp_feature_spec() -> FeatureMapSpec:
    """Pendulum-arm feature map: [add*cos(theta), ad^2*sin(2 theta), sin(theta), thd]."""
    return FeatureMapSpec(
        [
            [FeatureFactor("alpha", 2, 1), FeatureFactor("theta", 0, 1, "cos")],
            [FeatureFactor("alpha", 1, 2), FeatureFactor("theta", 0, 1, "sin2")],
            [FeatureFactor("theta", 0, 1, "sin")],
            [FeatureFactor("theta", 1, 1)],
        ]
    )


def bb_derivative_free_kernel(p_hist, theta_hist, input_dim=None) -> SumKernel:
    """Physics-structured derivative-free kernel for the ball-and-beam."""
    return compile_physics_kernel(
        bb_feature_spec(), {"p": tuple(p_hist), "theta": tuple(theta_hist)}, input_dim
    )


def fp_derivative_free_kernel(theta_hist, alpha_hist, input_dim=None) -> SumKernel:
    """Physics-structured derivative-free kernel for the pendulum arm.

    ``alpha_hist`` should include the lagged command column so the kernel
    sees the complete actuation information in the state.
    """
    return compile_physics_kernel(
        fp_feature_spec(),
        {"theta": tuple(theta_hist), "alpha": tuple(alpha_hist)},
        input_dim,
    )


def bb_nonparametric_kernel(input_dim: int) -> RbfKernel:
    """Single RBF with full-Cholesky metric over the whole state."""
    sel = Selector(np.arange(input_dim), name="x")
    return RbfKernel(
        sel, MetricParam(MetricParam.FULL_CHOLESKY, input_dim), input_dim=input_dim
    )


def fp_nonparametric_kernel(theta_hist, alpha_hist, input_dim=None) -> ProductKernel:
    """Product of RBFs on the pendulum and arm slices, metrics independent."""
    sel_a = Selector(tuple(alpha_hist), name="alpha")
    sel_t = Selector(tuple(theta_hist), name="theta")
    k_a = RbfKernel(sel_a, MetricParam(MetricParam.FULL_CHOLESKY, sel_a.dim))
    k_t = RbfKernel(sel_t, MetricParam(MetricParam.FULL_CHOLESKY, sel_t.dim))
    return ProductKernel([k_a, k_t], input_dim=input_dim)


def initialize_hyperparameters(kernel: Kernel, X, y) -> None:
    """Scale-aware in-place hyperparameter initialization.

    Additive terms split the target variance equally; product factors take
    the share's root. RBF scaling factors get the variance share and metric
    diagonals the inverse input-slice variances. Polynomial kernels have no
    scaling factor, so their metric absorbs the output scale: diagonals are
    set so a typical feature vector maps the share onto the kernel value.
    Cholesky off-diagonals start at zero.
    """
    X = _as_matrix(X)
    var_y = max(float(np.var(np.asarray(y, dtype=float))), 1e-12)
    _init_node(kernel, X, var_y)


def _init_node(node: Kernel, X: np.ndarray, share: float) -> None:
    share = max(share, 1e-12)
    if isinstance(node, SumKernel):
        n = max(len(node.children), 1)
        for c in node.children:
            _init_node(c, X, share / n)
    elif isinstance(node, ProductKernel):
        for c in node.children:
            _init_node(c, X, share ** (1.0 / len(node.children)))
    elif isinstance(node, RbfKernel):
        node.log_scale = float(np.log(share))
        A = node.features.apply(X)
        stds = np.maximum(A.std(axis=0), 1e-8)
        node.metric.init_from_scales(1.0 / stds)
    elif isinstance(node, PolynomialKernel):
        A = node.features.apply(X)
        stds = np.maximum(A.std(axis=0), 1e-8)
        c = (share ** (1.0 / node.degree) / A.shape[1]) ** 0.5
        node.metric.init_from_scales(c / stds)
    else:
        raise TypeError(f"cannot initialize node of type {type(node).__name__}")
