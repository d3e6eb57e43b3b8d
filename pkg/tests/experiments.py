"""Experiment recipes shared by the acceptance suite.

These wire generated plant data through dataset construction, model
training and evaluation at a scale small enough for the acceptance runtime
budgets while preserving the qualitative comparisons of interest.
"""

import numpy as np

from dfmbrl import kernels as kn
from dfmbrl.evaluation import RolloutEvalConfig, one_step_rmse, rollout_rmse_k
from dfmbrl.filters import derivative_estimator
from dfmbrl.gp import GpModel, TrainConfig, train
from dfmbrl.ilqg import BbGpDynamics, FpGpDynamics, IlqgProblem, solve
from dfmbrl.kernels import (
    LinearFeatureKernel,
    MetricParam,
    PhysicsFeatureMap,
    RbfKernel,
    Selector,
)
from dfmbrl.plants import (
    BBParams,
    BBState,
    ExcitationConfig,
    FPParams,
    FPState,
    gen_excitation,
    simulate_bb,
    simulate_fp,
)
from dfmbrl.statespace import (
    bb_df_layout,
    build_deriv_dataset,
    build_df_dataset,
    deriv_layout,
    fp_df_layout,
)

# cutoffs scaled into the simulated 15 Hz Nyquist band (the hardware camera
# ran faster than the 30 Hz control loop)
BB_LOWPASS_CUTOFFS = (5.0, 8.0, 12.0)
BB_KALMAN_SIGMAS = (0.005, 0.5, 10.0)


def _fit(model, iters=100, lr=0.05, seed=0):
    trained, history = train(
        model, TrainConfig(optimizer="gd", learning_rate=lr, max_iters=iters, seed=seed)
    )
    return trained


def _subsample(X, y, n, seed):
    if len(y) <= n:
        return X, y
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(y), size=n, replace=False))
    return X[idx], y[idx]


def make_df_model(kind, plant, layout, X, y):
    if plant == "bb":
        hist = {"p": layout.indices("p"), "theta": layout.indices("theta")}
        pidf = lambda: kn.compile_physics_kernel(kn.bb_feature_spec(), hist,
                                                 input_dim=layout.dim)
        npdf = lambda: kn.bb_nonparametric_kernel(layout.dim)
    else:
        arm = tuple(layout.indices("alpha")) + tuple(layout.indices("alpha_des"))
        hist = {"theta": layout.indices("theta"), "alpha": arm}
        pidf = lambda: kn.compile_physics_kernel(kn.fp_feature_spec(), hist,
                                                 input_dim=layout.dim)
        npdf = lambda: kn.fp_nonparametric_kernel(layout.indices("theta"), arm,
                                                  input_dim=layout.dim)
    if kind == "pidf":
        kernel = pidf()
    elif kind == "npdf":
        kernel = npdf()
    elif kind == "spdf":
        kernel = kn.semiparametric(pidf(), npdf())
    else:
        raise ValueError(kind)
    kn.initialize_hyperparameters(kernel, X, y)
    return GpModel(X, y, kernel, np.log(max(0.1 * np.var(y), 1e-14)))


def simulate_bb_pair(seed, train_s=60.0, test_s=40.0, params=None):
    params = params or BBParams()
    rate = 1.0 / params.dt

    def excite(duration, sub_seed):
        return gen_excitation(ExcitationConfig(
            n_sinusoids=10, freq_low_hz=0.0, freq_high_hz=10.0,
            amplitude=np.deg2rad(5.0), duration_s=duration, rate_hz=rate,
            seed=sub_seed,
        ))

    train_traj = simulate_bb(params, excite(train_s, seed), seed=seed, noise=True)
    test_traj = simulate_bb(params, excite(test_s, seed + 5000),
                            seed=seed + 6000, noise=True)
    return params, train_traj, test_traj


def bb_prediction_experiment(seed, kp=4, n_train=500, iters=100):
    """One-step RMSE of the derivative-free physics model against the
    causal-filter baselines (and the acausal upper bound) on noisy data."""
    params, train_traj, test_traj = simulate_bb_pair(seed)
    results = {}

    layout = bb_df_layout(kp)
    ds = build_df_dataset(train_traj, layout, "p")
    X, y = _subsample(ds.X, ds.y, n_train, seed)
    model = _fit(make_df_model("pidf", "bb", layout, X, y), iters=iters)
    ts = build_df_dataset(test_traj, layout, "p")
    results["pidf"] = one_step_rmse(model.posterior_mean(ts.X), ts.y).rmse

    estimators = {}
    for c in BB_LOWPASS_CUTOFFS:
        estimators[f"lowpass_{c:g}"] = ("lowpass", {"cutoff_hz": c})
    for s in BB_KALMAN_SIGMAS:
        estimators[f"kalman_{s:g}"] = (
            "kalman", {"sigma_x": s, "meas_var": params.camera_noise_std**2},
        )
    estimators["savgol"] = ("savgol", {"window": 5, "order": 3})

    dl = deriv_layout(("p", "theta"), 0, orders=(0, 1))
    cols = dl.physics_columns()
    for name, (fkind, fparams) in estimators.items():
        est = derivative_estimator(fkind, **fparams)
        dtr = build_deriv_dataset(train_traj, dl, est, "p")
        dte = build_deriv_dataset(test_traj, dl, est, "p")
        Xf, yf = _subsample(dtr.X, dtr.y, n_train, seed)
        kernel = LinearFeatureKernel(
            PhysicsFeatureMap(kn.bb_feature_spec(), cols), input_dim=dl.dim
        )
        kn.initialize_hyperparameters(kernel, Xf, yf)
        m = _fit(GpModel(Xf, yf, kernel, np.log(max(0.1 * np.var(yf), 1e-14))),
                 iters=iters)
        results[name] = one_step_rmse(m.posterior_mean(dte.X), dte.y).rmse
    return results


def simulate_fp_pair(seed, train_s=40.0, test_s=30.0, params=None):
    params = params or FPParams()
    rate = 1.0 / params.dt

    def excite(duration, fhigh, sub_seed):
        return gen_excitation(ExcitationConfig(
            n_sinusoids=30, freq_low_hz=0.0, freq_high_hz=fhigh,
            amplitude=1.8, duration_s=duration, rate_hz=rate, seed=sub_seed,
        ))

    train_traj = simulate_fp(params, excite(train_s, 8.5 / (2 * np.pi), seed),
                             seed=seed, noise=True)
    test_traj = simulate_fp(params, excite(test_s, 15.0 / (2 * np.pi), seed + 5000),
                            seed=seed + 6000, noise=True)
    return params, train_traj, test_traj


def fp_data_efficiency_experiment(seed, checkpoint_s=2.0, kp=15, iters=100,
                                  n_test=1500):
    """PIDF versus NPDF one-step RMSE with only ``checkpoint_s`` seconds of
    training experience."""
    params, train_traj, test_traj = simulate_fp_pair(seed, train_s=6.0)
    layout = fp_df_layout(kp)
    ds = build_df_dataset(train_traj, layout, "theta")
    n = int(round(checkpoint_s / params.dt))
    X, y = ds.X[:n], ds.y[:n]
    ts = build_df_dataset(test_traj, layout, "theta")
    tX, ty = _subsample(ts.X, ts.y, n_test, seed + 1)
    out = {}
    for kind in ("pidf", "npdf"):
        model = _fit(make_df_model(kind, "fp", layout, X, y), iters=iters)
        out[kind] = one_step_rmse(model.posterior_mean(tX), ty).rmse
    return out


def fp_rollout_experiment(seed=0, kp=15, train_s=40.0, n_train=700, iters=150,
                          n_sim=200, window=100):
    """Rollout RMSE_k of the three derivative-free model families."""
    params, train_traj, test_traj = simulate_fp_pair(seed, train_s=train_s)
    layout = fp_df_layout(kp)
    ds = build_df_dataset(train_traj, layout, "theta")
    X, y = _subsample(ds.X, ds.y, n_train, seed)
    cfg = RolloutEvalConfig(n_sim=n_sim, window=window, seed=seed)
    out = {}
    for kind in ("pidf", "npdf", "spdf"):
        model = _fit(make_df_model(kind, "fp", layout, X, y), iters=iters)
        out[kind] = rollout_rmse_k({"theta": model}, test_traj, layout, cfg)
    return out


def bb_control_experiment(seed=0, kp=4, target=0.1, n_train=500, iters=150,
                          horizon=100, ilqg_iters=60):
    """Open-loop placement of the ball with an iLQG plan over the learned
    semiparametric model; returns the final position error on the noisy plant."""
    params, train_traj, _ = simulate_bb_pair(seed)
    layout = bb_df_layout(kp)
    ds = build_df_dataset(train_traj, layout, "p")
    X, y = _subsample(ds.X, ds.y, n_train, seed)
    model = _fit(make_df_model("spdf", "bb", layout, X, y), iters=iters)
    dyn = BbGpDynamics(model, kp)
    n = 2 * (kp + 1)
    Q = np.zeros((n, n))
    Q[0, 0] = 200.0
    d = np.zeros(n)
    d[0], d[1] = 1.0, -1.0
    Q += 60.0 / params.dt**2 * np.outer(d, d) * params.dt**2  # (p_k - p_{k-1})^2
    x_target = np.zeros(n)
    x_target[: kp + 1] = target
    problem = IlqgProblem(dyn, horizon, np.zeros(n), Q, np.array([[20.0]]),
                          x_target, 100.0 * Q,
                          u_min=np.array([-0.25]), u_max=np.array([0.25]))
    sol = solve(problem, max_iters=ilqg_iters)
    exec_traj = simulate_bb(params, sol.us[:, 0], seed=seed + 99, noise=True,
                            initial=BBState())
    final_p = exec_traj["p_true"][-1]
    return abs(final_p - target), sol


def fp_swingup_experiment(seed=0, kp=15, train_s=40.0, n_train=700, iters=150,
                          horizon=400, ilqg_iters=40):
    """Swing-up with an iLQG plan over the learned semiparametric model,
    executed open loop; returns (|theta|, |theta_dot|) at the horizon end."""
    params, train_traj, _ = simulate_fp_pair(seed, train_s=train_s)
    layout = fp_df_layout(kp)
    ds = build_df_dataset(train_traj, layout, "theta")
    X, y = _subsample(ds.X, ds.y, n_train, seed)
    model = _fit(make_df_model("spdf", "fp", layout, X, y), iters=iters)
    dyn = FpGpDynamics(model, kp, cmd_map=params.cmd_map)
    n = 2 * kp + 2
    Q = np.zeros((n, n))
    Q[0, 0] = 2.0
    d = np.zeros(n)
    d[0], d[1] = 1.0, -1.0
    Q += 6.0 * np.outer(d, d) / params.dt**2 * params.dt**2
    x_target = np.zeros(n)
    problem = IlqgProblem(dyn, horizon, dyn.planner_state(np.pi), Q,
                          np.array([[0.5]]), x_target, 60.0 * Q,
                          u_min=np.array([-2.5]), u_max=np.array([2.5]))
    sol = solve(problem, max_iters=ilqg_iters)
    exec_traj = simulate_fp(params, sol.us[:, 0], seed=seed + 99, noise=True,
                            initial=FPState(theta=np.pi))
    th_end = exec_traj["theta_true"][-1]
    thd_end = exec_traj["theta_dot_true"][-1]
    # fold the angle into [-pi, pi] around the upright
    th_err = np.arctan2(np.sin(th_end), np.cos(th_end))
    return abs(th_err), abs(thd_end), sol
