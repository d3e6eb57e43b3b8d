"""Shared test utilities: kernel family zoo and dense GP oracles."""

import numpy as np

from dfmbrl import kernels as kn
from dfmbrl.kernels import (
    LinearFeatureKernel,
    MetricParam,
    PhysicsFeatureMap,
    PolynomialKernel,
    RbfKernel,
    Selector,
)


def random_metric(kind, dim, rng, scale=0.5):
    n = dim if kind == MetricParam.DIAGONAL else dim * (dim + 1) // 2
    return MetricParam(kind, dim, scale * rng.standard_normal(n))


def kernel_zoo(rng, kp=2, param_scale=0.3):
    """All seven kernel families on small derivative-free layouts.

    BB layout: [p history, theta history], dim 2*(kp+1).
    FP layout: [theta history, alpha history + lagged command], dim 2*(kp+1)+1.
    Returns name -> (kernel, input_dim).
    """
    nb = 2 * (kp + 1)
    nf = 2 * (kp + 1) + 1
    p_hist = tuple(range(kp + 1))
    th_hist_bb = tuple(range(kp + 1, 2 * (kp + 1)))
    th_hist_fp = tuple(range(kp + 1))
    al_hist_fp = tuple(range(kp + 1, 2 * (kp + 1) + 1))

    pi_cols = {("p", 0): 0, ("p", 1): 1, ("theta", 0): 2, ("theta", 1): 3}
    pi = LinearFeatureKernel(
        PhysicsFeatureMap(kn.bb_feature_spec(), pi_cols),
        random_metric(MetricParam.FULL_CHOLESKY, 4, rng, param_scale),
        input_dim=4,
    )
    poly = PolynomialKernel(
        2,
        Selector(p_hist, name="p"),
        random_metric(MetricParam.FULL_CHOLESKY, kp + 1, rng, param_scale),
        input_dim=nb,
    )
    rbf = RbfKernel(
        Selector(tuple(range(nb)), name="x"),
        random_metric(MetricParam.DIAGONAL, nb, rng, param_scale),
        log_scale=rng.standard_normal() * param_scale,
        input_dim=nb,
    )
    pidf_bb = kn.bb_derivative_free_kernel(p_hist, th_hist_bb, input_dim=nb)
    pidf_fp = kn.fp_derivative_free_kernel(th_hist_fp, al_hist_fp, input_dim=nf)
    spdf_bb = kn.semiparametric(
        kn.bb_derivative_free_kernel(p_hist, th_hist_bb, input_dim=nb),
        kn.bb_nonparametric_kernel(nb),
    )
    spdf_fp = kn.semiparametric(
        kn.fp_derivative_free_kernel(th_hist_fp, al_hist_fp, input_dim=nf),
        kn.fp_nonparametric_kernel(th_hist_fp, al_hist_fp, input_dim=nf),
    )
    for k in (pidf_bb, pidf_fp, spdf_bb, spdf_fp):
        k.set_params(param_scale * rng.standard_normal(k.n_params))
    return {
        "pi": (pi, 4),
        "poly": (poly, nb),
        "rbf": (rbf, nb),
        "pidf_bb": (pidf_bb, nb),
        "pidf_fp": (pidf_fp, nf),
        "spdf_bb": (spdf_bb, nb),
        "spdf_fp": (spdf_fp, nf),
    }


def dense_posterior_oracle(kernel, X, y, noise_var, queries):
    """Posterior mean/variance via an explicit dense inverse."""
    K = kernel.gram(X) + noise_var * np.eye(len(y))
    Kinv = np.linalg.inv(K)
    Ks = kernel.gram(queries, X)
    mean = Ks @ Kinv @ y
    var = kernel.diag(queries) - np.sum((Ks @ Kinv) * Ks, axis=1)
    return mean, var


def dense_nmll_oracle(kernel, X, y, noise_var):
    """NMLL via explicit determinant and inverse of the regularized gram."""
    n = len(y)
    K = kernel.gram(X) + noise_var * np.eye(n)
    sign, logdet = np.linalg.slogdet(K)
    assert sign > 0
    return 0.5 * y @ np.linalg.inv(K) @ y + 0.5 * logdet + 0.5 * n * np.log(2 * np.pi)


def fd_hyperparameter_gradient(model, step=1e-6):
    """Central-difference NMLL gradient over the full hyperparameter vector."""
    theta = model.hyperparameters
    g = np.zeros(theta.size)
    for i in range(theta.size):
        h = step * max(1.0, abs(theta[i]))
        tp = theta.copy()
        tp[i] += h
        fp = model.with_hyperparameters(tp).nmll()
        tp[i] -= 2 * h
        fm = model.with_hyperparameters(tp).nmll()
        g[i] = (fp - fm) / (2 * h)
    return g
