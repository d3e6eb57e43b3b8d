"""Experiment pipeline behind the CLI verbs.

All four commands operate on a workspace directory with the conventional
layout ``data/``, ``models/``, ``reports/`` and ``control/``, so a full run
(generate, train, evaluate, control) chains from a single config with no
manual plumbing. Every output file embeds the config hash; all randomness
derives from the seeds in the config (optionally overridden per command).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import kernels as kn
from .config import config_hash, plant_params
from .evaluation import (
    RolloutEvalConfig,
    data_efficiency_curve,
    one_step_rmse,
    rollout_rmse_k,
)
from .filters import derivative_estimator
from .gp import GpModel, TrainConfig, train
from .ilqg import BbGpDynamics, FpGpDynamics, IlqgProblem, solve
from .kernels import (
    LinearFeatureKernel,
    MetricParam,
    PhysicsFeatureMap,
    RbfKernel,
    Selector,
)
from .modelio import load_model, save_model
from .plants import (
    BBParams,
    BBState,
    ExcitationConfig,
    FPParams,
    FPState,
    gen_excitation,
    simulate_bb,
    simulate_fp,
)
from .statespace import (
    StateLayout,
    Trajectory,
    bb_df_layout,
    build_deriv_dataset,
    build_df_dataset,
    deriv_layout,
    fp_df_layout,
    load_trajectory_csv,
    save_trajectory_csv,
    _write_csv,
)

TARGETS = {"bb": "p", "fp": "theta"}
COORDS = {"bb": ("p", "theta"), "fp": ("theta", "alpha")}


def data_dir(out) -> Path:
    return Path(out) / "data"


def models_dir(out) -> Path:
    return Path(out) / "models"


def reports_dir(out) -> Path:
    return Path(out) / "reports"


def control_dir(out) -> Path:
    return Path(out) / "control"


# --- layout / kernel / model construction ---------------------------------------------


def experiment_layout(cfg: dict) -> StateLayout:
    kind = cfg["plant"]["kind"]
    kp = cfg["state"]["kp"]
    if cfg["state"]["representation"] == "derivative_free":
        return bb_df_layout(kp) if kind == "bb" else fp_df_layout(kp)
    orders = (0, 1) if cfg["state"]["filter"]["kind"] == "kalman" else (0, 1, 2)
    if kind == "bb":
        return deriv_layout(COORDS["bb"], kp, orders)
    return deriv_layout(COORDS["fp"], kp, orders, controls=[("alpha_des", (1,))])


def feature_spec(cfg: dict) -> kn.FeatureMapSpec:
    if cfg["model"]["feature_map"] is not None:
        return kn.FeatureMapSpec.from_config(cfg["model"]["feature_map"])
    return kn.bb_feature_spec() if cfg["plant"]["kind"] == "bb" else kn.fp_feature_spec()


def fp_arm_kernel_indices(layout: StateLayout) -> tuple[int, ...]:
    """Arm history plus the lagged command column, as one kernel slice."""
    return tuple(layout.indices("alpha")) + tuple(layout.indices("alpha_des"))


def make_kernel(kind: str, cfg: dict, layout: StateLayout) -> kn.Kernel:
    plant = cfg["plant"]["kind"]
    if kind == "pidf":
        spec = feature_spec(cfg)
        if plant == "bb":
            return kn.compile_physics_kernel(
                spec,
                {"p": layout.indices("p"), "theta": layout.indices("theta")},
                input_dim=layout.dim,
            )
        return kn.compile_physics_kernel(
            spec,
            {"theta": layout.indices("theta"), "alpha": fp_arm_kernel_indices(layout)},
            input_dim=layout.dim,
        )
    if kind == "npdf":
        if plant == "bb":
            return kn.bb_nonparametric_kernel(layout.dim)
        return kn.fp_nonparametric_kernel(
            layout.indices("theta"), fp_arm_kernel_indices(layout),
            input_dim=layout.dim,
        )
    if kind == "spdf":
        return kn.semiparametric(
            make_kernel("pidf", cfg, layout), make_kernel("npdf", cfg, layout)
        )
    if kind == "pi":
        return LinearFeatureKernel(
            PhysicsFeatureMap(feature_spec(cfg), layout.physics_columns()),
            input_dim=layout.dim,
        )
    if kind == "rbf_deriv":
        sel = Selector(range(layout.dim), name="x")
        return RbfKernel(sel, MetricParam(MetricParam.DIAGONAL, layout.dim),
                         input_dim=layout.dim)
    raise ValueError(f"unknown model kind {kind!r}")


def make_model(kind: str, cfg: dict, layout: StateLayout, X, y) -> GpModel:
    kernel = make_kernel(kind, cfg, layout)
    kn.initialize_hyperparameters(kernel, X, y)
    noise0 = max(0.1 * float(np.var(y)), 1e-14)
    return GpModel(X, y, kernel, np.log(noise0))


def build_dataset(traj: Trajectory, cfg: dict, layout: StateLayout):
    target = TARGETS[cfg["plant"]["kind"]]
    if cfg["state"]["representation"] == "derivative_free":
        return build_df_dataset(traj, layout, target)
    fcfg = dict(cfg["state"]["filter"])
    estimator = derivative_estimator(fcfg.pop("kind"), **fcfg)
    return build_deriv_dataset(traj, layout, estimator, target)


def subsample(X, y, max_points, seed):
    if max_points is None or len(y) <= max_points:
        return X, y
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(y), size=max_points, replace=False))
    return X[idx], y[idx]


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(
        optimizer=t["optimizer"],
        learning_rate=t["learning_rate"],
        minibatch=t["minibatch"],
        max_iters=t["max_iters"],
        tol=t["tol"],
        seed=t["seed"],
    )


def predict_in_chunks(model: GpModel, X, chunk: int = 2000) -> np.ndarray:
    outs = [model.posterior_mean(X[i : i + chunk]) for i in range(0, len(X), chunk)]
    return np.concatenate(outs)


# --- generate ------------------------------------------------------------------------


def run_generate(cfg: dict, out, seed: int | None = None) -> dict:
    seed = cfg["seed"] if seed is None else seed
    kind = cfg["plant"]["kind"]
    params = plant_params(cfg)
    rate = 1.0 / params.dt
    exc = cfg["excitation"]
    chash = config_hash(cfg)
    ddir = data_dir(out)
    ddir.mkdir(parents=True, exist_ok=True)

    def excitation(duration, fhigh, sub_seed):
        return gen_excitation(
            ExcitationConfig(
                n_sinusoids=exc["n_sinusoids"],
                freq_low_hz=exc["freq_low_hz"],
                freq_high_hz=fhigh,
                amplitude=exc["amplitude"],
                duration_s=duration,
                rate_hz=rate,
                seed=sub_seed,
            )
        )

    u_train = excitation(exc["duration_s"], exc["freq_high_hz"], seed)
    u_test = excitation(exc["test"]["duration_s"], exc["test"]["freq_high_hz"],
                        seed + 1000)
    noise = cfg["plant"]["noise"]
    if kind == "bb":
        tr = simulate_bb(params, u_train, seed=seed, noise=noise)
        te = simulate_bb(params, u_test, seed=seed + 2000, noise=noise)
    else:
        tr = simulate_fp(params, u_train, seed=seed, noise=noise)
        te = simulate_fp(params, u_test, seed=seed + 2000, noise=noise)
    paths = {
        "train": ddir / "train.csv",
        "test": ddir / "test.csv",
        "meta": ddir / "meta.json",
    }
    save_trajectory_csv(tr, paths["train"], header_comment=f"config_hash={chash}")
    save_trajectory_csv(te, paths["test"], header_comment=f"config_hash={chash}")
    meta = {
        "config_hash": chash,
        "seed": seed,
        "plant": kind,
        "rows": {"train": len(tr), "test": len(te)},
        "dt": params.dt,
    }
    paths["meta"].write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return {"paths": {k: str(v) for k, v in paths.items()}, "meta": meta}


# --- train ----------------------------------------------------------------------------


def _load_traj(out, name) -> Trajectory:
    path = data_dir(out) / f"{name}.csv"
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return load_trajectory_csv(path)


def run_train(cfg: dict, out, seed: int | None = None) -> dict:
    seed = cfg["training"]["seed"] if seed is None else seed
    traj = _load_traj(out, "train")
    layout = experiment_layout(cfg)
    ds = build_dataset(traj, cfg, layout)
    X, y = subsample(ds.X, ds.y, cfg["model"]["max_train_points"], seed)
    tcfg = train_config(cfg)
    tcfg.seed = seed
    chash = config_hash(cfg)
    mdir = models_dir(out)
    mdir.mkdir(parents=True, exist_ok=True)
    results = {}
    for kind in cfg["model"]["kinds"]:
        model = make_model(kind, cfg, layout, X, y)
        initial = model.nmll()
        trained, history = train(model, tcfg)
        meta = {
            "kind": kind,
            "plant": cfg["plant"]["kind"],
            "target": TARGETS[cfg["plant"]["kind"]],
            "kp": cfg["state"]["kp"],
            "representation": cfg["state"]["representation"],
            "layout": layout.to_dict(),
            "config_hash": chash,
            "initial_nmll": initial,
            "final_nmll": history[-1],
        }
        save_model(trained, mdir / f"{kind}.json", meta=meta)
        _write_csv(
            mdir / f"{kind}_log.csv",
            ["iteration", "nmll"],
            np.column_stack([np.arange(len(history)), history]),
            header_comment=f"config_hash={chash}",
        )
        results[kind] = {
            "initial_nmll": initial,
            "final_nmll": history[-1],
            "iterations": len(history) - 1,
            "path": str(mdir / f"{kind}.json"),
        }
    return results


# --- evaluate --------------------------------------------------------------------------


def _load_models(cfg: dict, out) -> dict:
    mdir = models_dir(out)
    models = {}
    for kind in cfg["model"]["kinds"]:
        path = mdir / f"{kind}.json"
        if not path.exists():
            raise FileNotFoundError(f"model file not found: {path}")
        model, meta = load_model(path)
        if meta.get("plant") != cfg["plant"]["kind"] or meta.get("kp") != cfg["state"]["kp"]:
            raise ValueError(
                f"model {path} was trained for plant={meta.get('plant')} "
                f"kp={meta.get('kp')}, config expects "
                f"plant={cfg['plant']['kind']} kp={cfg['state']['kp']}"
            )
        models[kind] = (model, meta)
    return models


def run_evaluate(cfg: dict, out, seed: int | None = None, figures: bool = True) -> dict:
    ev = cfg["evaluation"]
    seed = ev["seed"] if seed is None else seed
    traj = _load_traj(out, "test")
    layout = experiment_layout(cfg)
    ds = build_dataset(traj, cfg, layout)
    test_X, test_y = subsample(ds.X, ds.y, ev["max_test_points"], seed + 1)
    models = _load_models(cfg, out)
    chash = config_hash(cfg)
    rdir = reports_dir(out)
    rdir.mkdir(parents=True, exist_ok=True)
    target = TARGETS[cfg["plant"]["kind"]]

    summary = {"config_hash": chash, "one_step": {}, "rollout": {}, "efficiency": {}}
    reports = {}
    rows = []
    for kind, (model, _) in models.items():
        preds = predict_in_chunks(model, test_X)
        rep = one_step_rmse(preds, test_y)
        reports[kind] = rep
        summary["one_step"][kind] = rep.to_dict()
        d = rep.to_dict()
        rows.append([d["rmse"], d["median"], d["q1"], d["q3"],
                     d["whisker_low"], d["whisker_high"], d["n_outliers"], d["n"]])
    _write_csv(
        rdir / "one_step.csv",
        ["rmse", "median", "q1", "q3", "whisker_low", "whisker_high",
         "n_outliers", "n"],
        np.asarray(rows),
        header_comment=f"config_hash={chash} kinds={','.join(models)}",
    )

    rollouts = {}
    if ev["n_sim"] > 0 and cfg["state"]["representation"] == "derivative_free":
        rcfg = RolloutEvalConfig(
            n_sim=ev["n_sim"], window=ev["window"],
            confidence=ev["confidence"], seed=seed,
        )
        for kind, (model, _) in models.items():
            res = rollout_rmse_k({target: model}, traj, layout, rcfg)
            rollouts[kind] = res
            _write_csv(
                rdir / f"rmse_k_{kind}.csv",
                ["k", "rmse", "lower", "upper"],
                res.to_rows(),
                header_comment=f"config_hash={chash}",
            )
            summary["rollout"][kind] = {
                "rmse_k_final": float(res.rmse[-1]),
                "rmse_k_first": float(res.rmse[0]),
            }

    curves = {}
    if ev["checkpoints_s"]:
        train_traj = _load_traj(out, "train")
        train_ds = build_dataset(train_traj, cfg, layout)
        tcfg = train_config(cfg)
        for kind in models:
            def factory(X, y, _kind=kind):
                return make_model(_kind, cfg, layout, X, y)

            curves[kind] = data_efficiency_curve(
                train_ds, traj.dt, factory, ev["checkpoints_s"],
                test_X, test_y, tcfg,
            )
            summary["efficiency"][kind] = [[s, r] for s, r in curves[kind]]
        cols = ["seconds"] + list(curves)
        arr = np.column_stack(
            [[s for s, _ in next(iter(curves.values()))]]
            + [[r for _, r in curves[k]] for k in curves]
        )
        _write_csv(rdir / "efficiency.csv", cols, arr,
                   header_comment=f"config_hash={chash}")

    (rdir / "summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")

    if figures:
        from . import figures as figs

        figs.error_boxplot(reports, rdir / "one_step_boxplot.png")
        if rollouts:
            figs.rollout_bands(rollouts, rdir / "rmse_k.png")
        if curves:
            figs.efficiency_curves(curves, rdir / "efficiency.png")
    return summary


# --- control ---------------------------------------------------------------------------


def _bb_cost(cfg: dict, kp: int, dt: float):
    ctl = cfg["control"]
    n = 2 * (kp + 1)
    Q = np.zeros((n, n))
    Q[0, 0] = ctl["position_weight"]
    d = np.zeros(n)
    d[0], d[1] = 1.0, -1.0
    Q += ctl["velocity_weight"] / dt**2 * np.outer(d, d)
    x_target = np.zeros(n)
    x_target[: kp + 1] = ctl["target"]
    R = np.array([[ctl["control_weight"]]])
    return Q, R, x_target


def _fp_cost(cfg: dict, kp: int, dt: float):
    ctl = cfg["control"]
    n = 2 * kp + 2
    Q = np.zeros((n, n))
    Q[0, 0] = ctl["position_weight"]
    d = np.zeros(n)
    d[0], d[1] = 1.0, -1.0
    Q += ctl["velocity_weight"] / dt**2 * np.outer(d, d)
    x_target = np.zeros(n)
    x_target[: kp + 1] = ctl["target"]
    R = np.array([[ctl["control_weight"]]])
    return Q, R, x_target


def _closed_loop_execute(plant_kind, params, dyn, sol, seed, noise):
    """Replay the plan with the stored feedback gains acting on the planner
    state rebuilt from measurements; returns the applied command sequence."""
    from .plants import BallAndBeam, FurutaPendulum

    N = sol.us.shape[0]
    us = np.zeros(N)
    if plant_kind == "bb":
        plant = BallAndBeam(params, BBState())
        kp = dyn.kp
        x_hat = sol.xs[0].copy()
        rng = np.random.default_rng(seed)
        meas = {"p": 0.0, "theta": 0.0}
        for t in range(N):
            u = sol.us[t, 0] + float(sol.K_fb[t] @ (x_hat - sol.xs[t]))
            us[t] = u
            meas, _ = plant.step(u, rng, noise)
            x_hat = np.concatenate([
                [meas["p"]], x_hat[:kp],
                [u], x_hat[kp + 1 : 2 * kp + 1],
            ])
    else:
        plant = FurutaPendulum(params, FPState(theta=np.pi))
        kp = dyn.kp
        x_hat = sol.xs[0].copy()
        rng = np.random.default_rng(seed)
        for t in range(N):
            u = sol.us[t, 0] + float(sol.K_fb[t] @ (x_hat - sol.xs[t]))
            us[t] = u
            meas, info = plant.step(u, rng, noise)
            applied = info["alpha_des"]
            us[t] = applied
            x_hat = np.concatenate([
                [meas["theta"]], x_hat[:kp],
                [meas["alpha"]], x_hat[kp + 1 : 2 * kp],
                [applied],
            ])
    return us


def run_control(cfg: dict, out, seed: int | None = None, figures: bool = True) -> dict:
    ctl = cfg["control"]
    seed = cfg["seed"] if seed is None else seed
    kind = ctl["model"]
    mdir = models_dir(out)
    path = mdir / f"{kind}.json"
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    model, meta = load_model(path)
    if meta.get("representation") != "derivative_free":
        raise ValueError("trajectory optimization requires a derivative-free model")
    kp = int(meta["kp"])
    params = plant_params(cfg)
    plant_kind = cfg["plant"]["kind"]
    dt = params.dt
    chash = config_hash(cfg)
    cdir = control_dir(out)
    cdir.mkdir(parents=True, exist_ok=True)

    if plant_kind == "bb":
        dyn = BbGpDynamics(model, kp)
        Q, R, x_target = _bb_cost(cfg, kp, dt)
        x0 = np.zeros(2 * (kp + 1))
    else:
        dyn = FpGpDynamics(model, kp, cmd_map=params.cmd_map)
        Q, R, x_target = _fp_cost(cfg, kp, dt)
        x0 = dyn.planner_state(theta0=np.pi)
    problem = IlqgProblem(
        dyn, ctl["horizon"], x0, Q, R, x_target, ctl["terminal_scale"] * Q,
        u_min=np.array([ctl["u_min"]]), u_max=np.array([ctl["u_max"]]),
    )
    sol = solve(problem, max_iters=ctl["max_iters"])

    sol_rows = np.column_stack([np.arange(ctl["horizon"]), sol.us[:, 0],
                                sol.xs[:-1]])
    _write_csv(
        cdir / "solution.csv",
        ["step", "u"] + [f"x{i}" for i in range(problem.n)],
        sol_rows,
        header_comment=f"config_hash={chash}",
    )

    noise = cfg["plant"]["noise"]
    if ctl["closed_loop"]:
        us = _closed_loop_execute(plant_kind, params, dyn, sol, seed, noise)
    else:
        us = sol.us[:, 0]
    if plant_kind == "bb":
        exec_traj = simulate_bb(params, us, seed=seed, noise=noise,
                                initial=BBState())
        realized = exec_traj["p_true"]
        planned = sol.xs[: ctl["horizon"], 0]
        final_err = abs(realized[-1] - ctl["target"])
        exec_summary = {
            "final_position_error": float(final_err),
            "final_position": float(realized[-1]),
        }
    else:
        exec_traj = simulate_fp(params, us, seed=seed, noise=noise,
                                initial=FPState(theta=np.pi))
        realized = exec_traj["theta_true"]
        planned = sol.xs[: ctl["horizon"], 0]
        exec_summary = {
            "final_angle": float(realized[-1]),
            "final_velocity": float(exec_traj["theta_dot_true"][-1]),
        }
    _write_csv(
        cdir / "execution.csv",
        ["step", "time", "u", "planned", "realized"],
        np.column_stack([
            np.arange(len(us)), np.arange(len(us)) * dt, us, planned, realized,
        ]),
        header_comment=f"config_hash={chash}",
    )
    summary = {
        "config_hash": chash,
        "model": kind,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "final_cost": sol.final_cost,
        **exec_summary,
    }
    (cdir / "summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    if figures:
        from . import figures as figs

        label = "ball position [m]" if plant_kind == "bb" else "pendulum angle [rad]"
        figs.control_comparison(
            np.arange(len(us)) * dt, planned, realized, us, label,
            cdir / "control.png",
        )
    return summary
