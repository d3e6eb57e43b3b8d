import numpy as np
import pytest

from dfmbrl import kernels as kn
from dfmbrl.evaluation import (
    RolloutEvalConfig,
    data_efficiency_curve,
    one_step_rmse,
    rollout_rmse_k,
)
from dfmbrl.gp import GpModel, TrainConfig
from dfmbrl.kernels import MetricParam, RbfKernel, Selector
from dfmbrl.statespace import Trajectory, build_df_dataset, fp_df_layout


# --- one-step error reports -----------------------------------------------------


def test_rmse_zero_on_perfect_predictions():
    r = one_step_rmse([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.rmse == 0.0
    assert r.n_outliers == 0


def test_rmse_hand_value():
    r = one_step_rmse([0.0, 0.0], [3.0, 4.0])
    assert r.rmse == pytest.approx(np.sqrt(12.5), rel=1e-14)


def test_rmse_squared_is_mean_of_squares():
    rng = np.random.default_rng(0)
    e = rng.standard_normal(100)
    r = one_step_rmse(np.zeros(100), e)
    assert r.rmse**2 == pytest.approx(np.mean(e**2), abs=1e-12)


def test_boxplot_summary_fields():
    rng = np.random.default_rng(1)
    errs = np.concatenate([rng.uniform(0, 1, 200), [10.0]])  # one outlier
    r = one_step_rmse(np.zeros_like(errs), errs)
    assert r.q1 < r.median < r.q3
    assert r.whisker_high <= r.q3 + 1.5 * (r.q3 - r.q1) + 1e-12
    assert r.n_outliers >= 1


def test_rmse_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        one_step_rmse([], [])


def test_reference_ordering_of_error_reports():
    # ordering logic on known RMSE levels: acausal best, derivative-free
    # second, causal baselines behind
    rng = np.random.default_rng(2)
    n = 4000
    reports = {
        name: one_step_rmse(np.zeros(n), scale * rng.standard_normal(n))
        for name, scale in [
            ("sg", 0.2013), ("df", 0.2393), ("n2", 0.2963), ("kf2", 0.3064)
        ]
    }
    ordered = sorted(reports, key=lambda k: reports[k].rmse)
    assert ordered == ["sg", "df", "n2", "kf2"]


# --- shared fixtures ---------------------------------------------------------------


def sine_fp_trajectory(T=400, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    dt = 0.0071
    t = np.arange(T) * dt
    theta = np.pi + 0.4 * np.sin(2.1 * t) + 0.1 * np.sin(5.3 * t + 0.5)
    alpha_des = 0.3 * np.sin(3.0 * t)
    alpha = np.concatenate([[0.0], 0.5 * np.diff(alpha_des)])
    if noise:
        theta = theta + noise * rng.standard_normal(T)
    return Trajectory(dt, {"theta": theta, "alpha": alpha, "alpha_des": alpha_des})


def fit_theta_model(traj, layout, n_max=150):
    ds = build_df_dataset(traj, layout, "theta")
    X, y = ds.X[:n_max], ds.y[:n_max]
    k = RbfKernel(Selector(range(layout.dim), name="x"),
                  MetricParam("diagonal", layout.dim))
    kn.initialize_hyperparameters(k, X, y)
    return GpModel(X, y, k, np.log(max(1e-10, 0.01 * np.var(y))))


# --- data-efficiency curve -----------------------------------------------------------


def test_efficiency_curve_deterministic_and_consistent():
    traj = sine_fp_trajectory()
    layout = fp_df_layout(2)
    ds = build_df_dataset(traj, layout, "theta")
    test_X, test_y = ds.X[200:300], ds.y[200:300]

    def factory(X, y):
        k = RbfKernel(Selector(range(layout.dim), name="x"),
                      MetricParam("diagonal", layout.dim))
        kn.initialize_hyperparameters(k, X, y)
        return GpModel(X, y, k)

    cfg = TrainConfig(optimizer="gd", max_iters=15, seed=0)
    pts = 140 * traj.dt
    curve = data_efficiency_curve(ds, traj.dt, factory, [pts, pts], test_X, test_y, cfg)
    assert curve[0][1] == curve[1][1]  # identical checkpoints, identical RMSE

    # final checkpoint equals a direct train-and-score run
    from dfmbrl.evaluation import one_step_rmse
    from dfmbrl.gp import train

    n = int(round(pts / traj.dt))
    trained, _ = train(factory(ds.X[:n], ds.y[:n]), cfg)
    direct = one_step_rmse(trained.posterior_mean(test_X), test_y).rmse
    assert curve[-1][1] == pytest.approx(direct, rel=1e-12)


def test_efficiency_curve_checkpoint_beyond_data():
    traj = sine_fp_trajectory(T=100)
    layout = fp_df_layout(2)
    ds = build_df_dataset(traj, layout, "theta")
    with pytest.raises(ValueError, match="checkpoint"):
        data_efficiency_curve(ds, traj.dt, lambda X, y: None, [1e6], None, None,
                              TrainConfig())


# --- rollout RMSE^k --------------------------------------------------------------------


def test_rollout_rmse_near_zero_for_exact_model():
    # the "model" replays the exact increments: build a GP that interpolates
    # the true one-step map of a noiseless trajectory it was trained on
    traj = sine_fp_trajectory(T=500)
    layout = fp_df_layout(3)
    model = fit_theta_model(traj, layout, n_max=400)
    from dfmbrl.gp import TrainConfig, train

    model, _ = train(model, TrainConfig(optimizer="gd", max_iters=40))
    cfg = RolloutEvalConfig(n_sim=10, window=20, seed=0)
    res = rollout_rmse_k({"theta": model}, traj, layout, cfg)
    # interpolated smooth dynamics: rollout error stays small over the window
    assert res.rmse[0] < 5e-4
    assert res.rmse[-1] < 5e-2


def test_rollout_rmse_single_simulation_definition():
    traj = sine_fp_trajectory(T=300)
    layout = fp_df_layout(2)
    model = fit_theta_model(traj, layout)
    cfg = RolloutEvalConfig(n_sim=1, window=10, seed=3)
    res = rollout_rmse_k({"theta": model}, traj, layout, cfg)
    np.testing.assert_allclose(res.rmse, np.abs(res.errors[0]), atol=1e-15)
    from scipy import stats

    chi_lo = stats.chi2.ppf(0.005, df=1)
    chi_hi = stats.chi2.ppf(0.995, df=1)
    np.testing.assert_allclose(res.upper, res.rmse * np.sqrt(1 / chi_lo), rtol=1e-12)
    np.testing.assert_allclose(res.lower, res.rmse * np.sqrt(1 / chi_hi), rtol=1e-12)


def test_rollout_rmse_first_step_matches_one_step_errors():
    traj = sine_fp_trajectory(T=300)
    layout = fp_df_layout(2)
    model = fit_theta_model(traj, layout)
    cfg = RolloutEvalConfig(n_sim=25, window=5, seed=1)
    res = rollout_rmse_k({"theta": model}, traj, layout, cfg)
    # recompute the one-step errors at the sampled starts directly
    errs = []
    for k in res.start_indices:
        from dfmbrl.statespace import DfState

        x = DfState.from_trajectory(traj, layout, int(k)).vector(layout)
        pred = traj["theta"][k] + model.posterior_mean(x[None, :])[0]
        errs.append(traj["theta"][k + 1] - pred)
    expected = np.sqrt(np.mean(np.asarray(errs) ** 2))
    assert res.rmse[0] == pytest.approx(expected, abs=1e-12)


def test_rollout_rmse_interval_contains_estimate_and_shrinks():
    traj = sine_fp_trajectory(T=600, noise=1e-4)
    layout = fp_df_layout(2)
    model = fit_theta_model(traj, layout)
    res_small = rollout_rmse_k({"theta": model}, traj, layout,
                               RolloutEvalConfig(n_sim=5, window=8, seed=2))
    res_big = rollout_rmse_k({"theta": model}, traj, layout,
                             RolloutEvalConfig(n_sim=80, window=8, seed=2))
    assert np.all(res_small.lower <= res_small.rmse)
    assert np.all(res_small.rmse <= res_small.upper)
    width_small = (res_small.upper / np.maximum(res_small.lower, 1e-300)).mean()
    width_big = (res_big.upper / np.maximum(res_big.lower, 1e-300)).mean()
    assert width_big < width_small  # relative width shrinks with n_sim


def test_rollout_rmse_deterministic():
    traj = sine_fp_trajectory(T=300)
    layout = fp_df_layout(2)
    model = fit_theta_model(traj, layout)
    cfg = RolloutEvalConfig(n_sim=10, window=6, seed=9)
    r1 = rollout_rmse_k({"theta": model}, traj, layout, cfg)
    r2 = rollout_rmse_k({"theta": model}, traj, layout, cfg)
    np.testing.assert_array_equal(r1.rmse, r2.rmse)
    np.testing.assert_array_equal(r1.start_indices, r2.start_indices)


def test_rollout_rmse_insufficient_trajectory():
    traj = sine_fp_trajectory(T=50)
    layout = fp_df_layout(2)
    model = fit_theta_model(traj, layout, n_max=30)
    with pytest.raises(ValueError, match="too short"):
        rollout_rmse_k({"theta": model}, traj, layout,
                       RolloutEvalConfig(n_sim=5, window=100))
