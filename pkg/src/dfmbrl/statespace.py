"""Trajectories, state layouts and regression datasets.

Two state representations are supported. The derivative-free state stacks,
per coordinate, the last kp+1 measured positions (newest first), optionally
followed by lagged command values. The derivative-based state stacks
positions together with filter-estimated velocities and accelerations over
the same window. Both map onto flat row vectors through a StateLayout, which
also records what each column is (position history, estimated derivative,
command), so kernels can be audited for which signals they consume.

Regression targets are always one-step position increments of the modeled
coordinate: y_k = q_{k+1} - q_k.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import InputShapeError

CSV_FLOAT_FMT = "%.17g"

KIND_POSITION = "position"
KIND_VELOCITY = "velocity"
KIND_ACCELERATION = "acceleration"
KIND_CONTROL = "control"


@dataclass
class Trajectory:
    """Uniformly sampled per-step records keyed by channel name."""

    dt: float
    channels: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("sampling time must be positive")
        self.channels = {k: np.asarray(v, dtype=float) for k, v in self.channels.items()}
        lengths = {v.shape[0] for v in self.channels.values()}
        if len(lengths) > 1:
            raise ValueError(f"channel lengths differ: {sorted(lengths)}")

    def __len__(self) -> int:
        return next(iter(self.channels.values())).shape[0] if self.channels else 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    @property
    def duration(self) -> float:
        return len(self) * self.dt


def save_trajectory_csv(traj: Trajectory, path, header_comment: str | None = None) -> None:
    names = ["time"] + list(traj.channels)
    cols = [np.arange(len(traj)) * traj.dt] + [traj.channels[n] for n in names[1:]]
    _write_csv(path, names, np.column_stack(cols), header_comment)


def load_trajectory_csv(path, meta: dict | None = None) -> Trajectory:
    names, data = _read_csv(path)
    if names[0] != "time":
        raise ValueError(f"{path}: expected leading 'time' column, got {names[0]!r}")
    t = data[:, 0]
    if len(t) < 2:
        raise ValueError(f"{path}: trajectory too short")
    steps = np.diff(t)
    dt = steps[0]
    if np.any(np.abs(steps - dt) > 1e-9 * max(dt, 1.0)):
        raise ValueError(f"{path}: non-uniform sampling")
    channels = {n: data[:, i + 1] for i, n in enumerate(names[1:])}
    return Trajectory(dt, channels, meta or {})


def _write_csv(path, names, data, header_comment=None) -> None:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    buf.write(",".join(names) + "\n")
    np.savetxt(buf, np.atleast_2d(data), fmt=CSV_FLOAT_FMT, delimiter=",")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _read_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    rows = [ln for ln in lines if ln and not ln.startswith("#")]
    names = rows[0].split(",")
    data = np.loadtxt(io.StringIO("\n".join(rows[1:])), delimiter=",", ndmin=2)
    return names, data


# --- state layouts -----------------------------------------------------------


@dataclass(frozen=True)
class LayoutSlice:
    name: str          # slice label, e.g. "p", "theta_dot", "alpha_des"
    var: str           # source channel in the trajectory
    kind: str          # position | velocity | acceleration | control
    lags: tuple[int, ...]
    start: int

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(range(self.start, self.start + len(self.lags)))


class StateLayout:
    """Flat-vector layout composed of named, lagged channel slices."""

    def __init__(self, slices: list[LayoutSlice], kp: int):
        self.slices = list(slices)
        self.kp = kp
        self.dim = sum(len(s.lags) for s in self.slices)
        self._by_name = {s.name: s for s in self.slices}
        if len(self._by_name) != len(self.slices):
            raise ValueError("duplicate slice names in layout")

    def indices(self, name: str) -> tuple[int, ...]:
        return self._by_name[name].indices

    def slice_names(self) -> list[str]:
        return [s.name for s in self.slices]

    @property
    def max_lag(self) -> int:
        return max(max(s.lags) for s in self.slices)

    def column_names(self) -> list[str]:
        names = []
        for s in self.slices:
            for lag in s.lags:
                names.append(f"{s.name}[k]" if lag == 0 else f"{s.name}[k-{lag}]")
        return names

    def column_kinds(self) -> list[str]:
        kinds = []
        for s in self.slices:
            kinds.extend([s.kind] * len(s.lags))
        return kinds

    def position_vars(self) -> list[str]:
        return [s.var for s in self.slices if s.kind == KIND_POSITION]

    def physics_columns(self) -> dict[tuple[str, int], int]:
        """(variable, derivative order) -> column of the current-time value."""
        order_of = {KIND_POSITION: 0, KIND_VELOCITY: 1, KIND_ACCELERATION: 2}
        cols = {}
        for s in self.slices:
            if s.kind in order_of and 0 in s.lags:
                col = s.start + s.lags.index(0)
                cols[(s.var, order_of[s.kind])] = col
        return cols

    def history_indices(self) -> dict[str, tuple[int, ...]]:
        """Position-history slices by source variable."""
        return {
            s.var: s.indices for s in self.slices if s.kind == KIND_POSITION
        }

    def control_slices(self) -> list[LayoutSlice]:
        return [s for s in self.slices if s.kind == KIND_CONTROL]

    def to_dict(self) -> dict:
        return {
            "kp": self.kp,
            "slices": [
                {
                    "name": s.name,
                    "var": s.var,
                    "kind": s.kind,
                    "lags": list(s.lags),
                    "start": s.start,
                }
                for s in self.slices
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateLayout":
        slices = [
            LayoutSlice(s["name"], s["var"], s["kind"], tuple(s["lags"]), s["start"])
            for s in d["slices"]
        ]
        return cls(slices, d["kp"])


def _build_layout(entries, kp) -> StateLayout:
    slices = []
    start = 0
    for name, var, kind, lags in entries:
        slices.append(LayoutSlice(name, var, kind, tuple(lags), start))
        start += len(lags)
    return StateLayout(slices, kp)


def df_layout(coords, kp: int, controls=()) -> StateLayout:
    """Derivative-free layout: per-coordinate position histories, newest
    first, followed by lagged command channels given as (name, lags)."""
    if kp < 0:
        raise ValueError("kp must be non-negative")
    hist = tuple(range(kp + 1))
    entries = [(c, c, KIND_POSITION, hist) for c in coords]
    entries += [(name, name, KIND_CONTROL, tuple(lags)) for name, lags in controls]
    return _build_layout(entries, kp)


def deriv_layout(coords, kp: int, orders=(0, 1, 2), controls=()) -> StateLayout:
    """Derivative-based layout: per-coordinate windows of positions and
    filter-estimated derivatives of the selected orders."""
    if kp < 0:
        raise ValueError("kp must be non-negative")
    hist = tuple(range(kp + 1))
    suffix = {0: ("", KIND_POSITION), 1: ("_dot", KIND_VELOCITY), 2: ("_ddot", KIND_ACCELERATION)}
    entries = []
    for c in coords:
        for order in orders:
            sfx, kind = suffix[order]
            entries.append((f"{c}{sfx}", c, kind, hist))
    entries += [(name, name, KIND_CONTROL, tuple(lags)) for name, lags in controls]
    return _build_layout(entries, kp)


def bb_df_layout(kp: int, include_command: bool = False) -> StateLayout:
    controls = [("u", (0,))] if include_command else []
    return df_layout(("p", "theta"), kp, controls)


def fp_df_layout(kp: int) -> StateLayout:
    return df_layout(("theta", "alpha"), kp, controls=[("alpha_des", (1,))])


def bb_pi_layout() -> StateLayout:
    """Current-time positions and estimated velocities only."""
    return deriv_layout(("p", "theta"), 0, orders=(0, 1))


def fp_deriv_layout(kp: int) -> StateLayout:
    return deriv_layout(("theta", "alpha"), kp, controls=[("alpha_des", (1,))])


# --- derivative-free state ------------------------------------------------------


@dataclass(frozen=True)
class DfState:
    """Position histories (newest first) plus lagged command values.

    ``controls`` holds, per command channel, the most recent values newest
    first, so a layout lag of j reads entry j-1.
    """

    kp: int
    histories: dict[str, np.ndarray]
    controls: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "histories",
            {k: np.asarray(v, dtype=float) for k, v in self.histories.items()},
        )
        object.__setattr__(
            self, "controls",
            {k: np.asarray(v, dtype=float) for k, v in self.controls.items()},
        )
        for k, v in self.histories.items():
            if v.shape != (self.kp + 1,):
                raise ValueError(f"history {k!r} must hold kp+1={self.kp + 1} samples")

    def advance(self, new_positions: dict, new_controls: dict | None = None) -> "DfState":
        """Shift every history by one step and insert the new samples.

        All previously held samples move unchanged to the next-older slot
        (the transition of the lagged components is the identity map).
        """
        if set(new_positions) != set(self.histories):
            raise ValueError(
                f"new positions must cover {sorted(self.histories)}, "
                f"got {sorted(new_positions)}"
            )
        hist = {
            k: np.concatenate([[float(new_positions[k])], v[:-1]])
            for k, v in self.histories.items()
        }
        new_controls = new_controls or {}
        ctrl = {}
        for k, v in self.controls.items():
            if k not in new_controls:
                raise ValueError(f"missing new control value for {k!r}")
            ctrl[k] = np.concatenate([[float(new_controls[k])], v[:-1]])
        return DfState(self.kp, hist, ctrl)

    def vector(self, layout: StateLayout) -> np.ndarray:
        out = np.empty(layout.dim)
        for s in layout.slices:
            if s.kind == KIND_POSITION:
                src = self.histories[s.var]
                out[list(s.indices)] = src[list(s.lags)]
            elif s.kind == KIND_CONTROL:
                src = self.controls[s.var]
                out[list(s.indices)] = [src[lag - 1] for lag in s.lags]
            else:
                raise InputShapeError(
                    "derivative-free states cannot fill derivative columns"
                )
        return out

    @classmethod
    def from_trajectory(cls, traj: Trajectory, layout: StateLayout, k: int) -> "DfState":
        if k < layout.max_lag:
            raise ValueError(f"need k >= {layout.max_lag}, got {k}")
        hist = {}
        ctrl = {}
        for s in layout.slices:
            ch = traj[s.var]
            if s.kind == KIND_POSITION:
                hist[s.var] = ch[k - np.arange(layout.kp + 1)]
            elif s.kind == KIND_CONTROL:
                depth = max(s.lags)
                ctrl[s.var] = ch[k - np.arange(1, depth + 1)]
        return cls(layout.kp, hist, ctrl)


def rollout_state(state: DfState, new_positions: dict, new_controls: dict | None = None) -> DfState:
    """Advance a derivative-free state by one sample (see DfState.advance)."""
    return state.advance(new_positions, new_controls)


# --- regression datasets ------------------------------------------------------------


@dataclass
class RegressionDataset:
    X: np.ndarray
    y: np.ndarray
    layout: StateLayout
    k_index: np.ndarray
    target: str

    def __post_init__(self):
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("inputs and targets must have equal length")

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def target_name(self) -> str:
        return f"target_d{self.target}"

    def column_names(self) -> list[str]:
        return self.layout.column_names() + [self.target_name]


def save_dataset_csv(ds: RegressionDataset, path, header_comment: str | None = None) -> None:
    _write_csv(path, ds.column_names(), np.column_stack([ds.X, ds.y]), header_comment)


def load_dataset_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read back (inputs, targets, column names); values round-trip exactly."""
    names, data = _read_csv(path)
    if not names[-1].startswith("target_"):
        raise ValueError(f"{path}: last column must be the target, got {names[-1]!r}")
    return data[:, :-1], data[:, -1], names


def _assemble(channels: dict[str, np.ndarray], layout: StateLayout,
              target: str, ks: np.ndarray) -> RegressionDataset:
    X = np.empty((ks.size, layout.dim))
    for s in layout.slices:
        ch = channels[s.name] if s.name in channels else channels[s.var]
        for col, lag in zip(s.indices, s.lags):
            X[:, col] = ch[ks - lag]
    q = channels[target]
    y = q[ks + 1] - q[ks]
    return RegressionDataset(X, y, layout, ks.copy(), target)


def build_df_dataset(traj: Trajectory, layout: StateLayout, target: str) -> RegressionDataset:
    """Windowed derivative-free regression pairs from a trajectory.

    Row k holds the position histories (and lagged commands) at time k; the
    target is the next-step position increment of the modeled coordinate.
    """
    T = len(traj)
    if T <= layout.max_lag + 1:
        raise ValueError(
            f"trajectory length {T} too short for history depth {layout.max_lag}"
        )
    ks = np.arange(layout.max_lag, T - 1)
    return _assemble(traj.channels, layout, target, ks)


def build_deriv_dataset(traj: Trajectory, layout: StateLayout, estimator,
                        target: str) -> RegressionDataset:
    """Derivative-based regression pairs using a velocity/acceleration estimator.

    ``estimator(signal, dt)`` must return an object with ``velocity``,
    ``acceleration`` (may be None) and ``warmup_pre``/``warmup_post`` sample
    counts. Position columns keep the raw measured signal; warm-up samples
    are dropped from both ends as reported by the estimator.
    """
    T = len(traj)
    channels = dict(traj.channels)
    warm_pre = 0
    warm_post = 0
    for s in layout.slices:
        if s.kind == KIND_POSITION or s.kind == KIND_CONTROL:
            continue
        base = traj[s.var]
        est = estimator(base, traj.dt)
        warm_pre = max(warm_pre, est.warmup_pre)
        warm_post = max(warm_post, est.warmup_post)
        if s.kind == KIND_VELOCITY:
            channels[s.name] = est.velocity
        else:
            if est.acceleration is None:
                raise ValueError(
                    f"estimator provides no acceleration estimate needed for {s.name!r}"
                )
            channels[s.name] = est.acceleration
    start = max(layout.max_lag + warm_pre, layout.max_lag)
    stop = T - 1 - warm_post
    if stop <= start:
        raise ValueError("estimator warm-up leaves no usable samples")
    ks = np.arange(start, stop)
    ds = _assemble(channels, layout, target, ks)
    ds.layout = layout
    return ds
