"""Evaluation: error metrics, state/state-derivative RMS, the scaling
identity behind the 1/tau normalization, the tau sweep, the loss-smoothness
probe, and a Gauss-Newton oracle that reconstructs the true state from past
inputs/outputs of a known synthetic system.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, replace

import numpy as np

from .data import (
    Dataset,
    SyntheticSystem,
    fit_normalizer,
    normalize_dataset,
    valid_start_indices,
)
from .errors import (
    DegenerateDataError,
    InvalidArgumentError,
    NoSolutionError,
    NumericFaultError,
    ObservabilityError,
    SubnetError,
)
from .model import (
    EvalTrace,
    SubnetModel,
    _sim_forward_plain,
    _windows,
    model_flatten,
    model_with_values,
    simulate_free_run,
)
from .nnmath import Array, mlp_forward, mlp_forward_cached
from .ode import SolverConfig, ode_step
from .training import TrainConfig, train

# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def rmse(y, y_hat) -> float:
    """sqrt(mean_k ||y_k - yhat_k||^2 / n_y), i.e. RMS over all entries."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64).T).T
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=np.float64).T).T
    if y.shape != y_hat.shape or y.shape[0] < 1:
        raise InvalidArgumentError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    d = y - y_hat
    return float(np.sqrt(np.mean(d * d)))


def nrmse(y, y_hat) -> float:
    """RMSE divided by the pooled standard deviation of the measured output."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64).T).T
    scale = float(np.sqrt(np.mean(y.var(axis=0))))
    if scale == 0.0:
        raise DegenerateDataError("measured output has zero variance")
    return rmse(y, y_hat) / scale


@dataclass(frozen=True)
class EvalReport:
    """Free-run evaluation summary in physical units."""

    rmse: float
    nrmse: float
    rms_x: float
    rms_f: float
    n_samples: int
    trace: EvalTrace


def _trace_rms(m: SubnetModel, trace: EvalTrace, ds: Dataset) -> tuple[float, float]:
    """RMS of the free-run states and of the raw f evaluations along them."""
    x = trace.states[:-1]
    u_norm = (ds.u[m.lag:] - m.norm.u_mean) / m.norm.u_std
    f_vals = mlp_forward(m.f_net, np.concatenate([x, u_norm], axis=1))
    return float(np.sqrt(np.mean(x * x))), float(np.sqrt(np.mean(f_vals * f_vals)))


def evaluate_model(m: SubnetModel, ds: Dataset) -> EvalReport:
    trace = simulate_free_run(m, ds)
    rms_x, rms_f = _trace_rms(m, trace, ds)
    return EvalReport(
        rmse=rmse(trace.y_meas, trace.y_pred),
        nrmse=nrmse(trace.y_meas, trace.y_pred),
        rms_x=rms_x,
        rms_f=rms_f,
        n_samples=trace.y_pred.shape[0],
        trace=trace,
    )


def state_rms(m: SubnetModel, ds: Dataset) -> tuple[float, float]:
    """(RMS of the free-run state trajectory, RMS of f before the 1/tau factor)."""
    trace = simulate_free_run(m, ds)
    return _trace_rms(m, trace, ds)


# --------------------------------------------------------------------------
# the scaling identity behind 1/tau
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TauNormalizationReport:
    gamma: float
    tau: float
    rms_x_tilde: float
    rms_f_tilde: float


def verify_theorem2(states, derivs) -> TauNormalizationReport:
    """Evaluate gamma = RMS(x), 1/tau = RMS(dx)/RMS(x) and the two scaled RMS values.

    For any bounded nonzero trajectory the scaled state and scaled derivative
    must both have RMS exactly 1; callers assert this to 1e-9.
    """
    x = np.asarray(states, dtype=np.float64)
    dx = np.asarray(derivs, dtype=np.float64)
    rms_x = float(np.sqrt(np.mean(x * x)))
    rms_dx = float(np.sqrt(np.mean(dx * dx)))
    if rms_x == 0.0 or rms_dx == 0.0:
        raise DegenerateDataError("states and derivatives must both have nonzero RMS")
    gamma = rms_x
    tau = rms_x / rms_dx
    rms_x_tilde = float(np.sqrt(np.mean((x / gamma) ** 2)))
    rms_f_tilde = tau * rms_dx / gamma
    return TauNormalizationReport(gamma, tau, rms_x_tilde, rms_f_tilde)


# --------------------------------------------------------------------------
# tau sweep
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCell:
    """Result of one (dt/tau, seed) training cell; NaNs when the run failed."""

    dt_over_tau: float
    seed: int
    rms_x: float
    rms_f: float
    test_rmse: float
    val_rmse: float
    error: str = ""


def run_cell(
    train_ds: Dataset, val_ds: Dataset, test_ds: Dataset,
    dt_over_tau: float, seed: int, train_cfg: TrainConfig,
    n_x: int, n_a: int, n_b: int, hidden: tuple[int, ...] = (64, 64),
    method: str = "rk4", substeps: int = 1,
) -> SweepCell:
    """Train one model at a fixed dt/tau and evaluate it on the test split.

    Initialization and batch order depend only on ``seed`` so cells at
    different dt/tau values are directly comparable; cells are independent
    and safe to run in parallel.
    """
    from .model import init_model  # deferred to keep module import order flat

    try:
        solver = SolverConfig(method, substeps, train_ds.dt / dt_over_tau, train_ds.dt)
        norm = fit_normalizer(train_ds)
        m0 = init_model(n_x, train_ds.n_u, train_ds.n_y, n_a, n_b, solver, norm,
                        mode=train_cfg.mode, hidden=hidden, seed=seed)
        best, hist = train(m0, train_ds, val_ds, replace(train_cfg, seed=seed))
        report = evaluate_model(best, test_ds)
        return SweepCell(dt_over_tau, seed, report.rms_x, report.rms_f,
                         report.rmse, hist.best_val_rmse)
    except SubnetError as e:
        nan = float("nan")
        return SweepCell(dt_over_tau, seed, nan, nan, nan, nan, error=str(e))


def tau_sweep(
    train_ds: Dataset, val_ds: Dataset, test_ds: Dataset,
    dt_over_tau_grid, seeds, train_cfg: TrainConfig,
    n_x: int, n_a: int, n_b: int, hidden: tuple[int, ...] = (64, 64),
    method: str = "rk4", substeps: int = 1,
) -> list[SweepCell]:
    """Train/evaluate over the (dt/tau) x seed grid; failures become NaN rows."""
    if len(list(dt_over_tau_grid)) == 0 or len(list(seeds)) == 0:
        raise InvalidArgumentError("grid and seeds must be nonempty")
    cells = []
    for ratio in dt_over_tau_grid:
        for seed in seeds:
            cells.append(run_cell(train_ds, val_ds, test_ds, float(ratio), int(seed),
                                  train_cfg, n_x, n_a, n_b, hidden, method, substeps))
    return cells


def save_sweep_csv(cells: list[SweepCell], path) -> None:
    """Tidy CSV (setting, seed, metric, value), one row per metric; box-plot ready."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "seed", "metric", "value"])
        for c in cells:
            for metric in ("rms_x", "rms_f", "test_rmse", "val_rmse"):
                w.writerow([repr(c.dt_over_tau), c.seed, metric, repr(getattr(c, metric))])


# --------------------------------------------------------------------------
# loss-smoothness probe
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeResult:
    T: int
    l_hat: float
    n_failed: int


def _truncated_loss_only(m: SubnetModel, u_norm: Array, y_norm: Array, ns: Array, T: int) -> float:
    win = _windows(u_norm, y_norm, ns, m.n_a, m.n_b)
    x0, _ = mlp_forward_cached(m.psi_net, win)
    steps = ns[:, None] + np.arange(T)[None, :]
    _, outputs = _sim_forward_plain(m, x0, u_norm[steps], ns)
    diff = outputs - y_norm[steps]
    return float(np.sum(diff * diff)) / (len(ns) * T)


def smoothness_probe(
    m: SubnetModel, ds: Dataset, T_values, n_probes: int, eps: float, seed: int = 0
) -> list[ProbeResult]:
    """Directional local Lipschitz surrogate of the truncated loss, per T.

    For each subsection length the loss over *all* valid subsections is
    probed along ``n_probes`` shared random unit directions in parameter
    space: L_hat(T) = max_d |V(theta + eps d) - V(theta)| / eps.  Probes that
    fault numerically are skipped and counted.
    """
    if n_probes < 1 or eps <= 0:
        raise InvalidArgumentError("need n_probes >= 1 and eps > 0")
    theta = model_flatten(m)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_probes, theta.values.size))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dsn = normalize_dataset(ds, m.norm)
    results = []
    for T in T_values:
        ns = valid_start_indices(ds.n, int(T), m.n_a, m.n_b)
        base = _truncated_loss_only(m, dsn.u, dsn.y, ns, int(T))
        best = 0.0
        failed = 0
        for d in dirs:
            try:
                perturbed = model_with_values(m, theta.values + eps * d)
                v = _truncated_loss_only(perturbed, dsn.u, dsn.y, ns, int(T))
            except NumericFaultError:
                failed += 1
                continue
            if not np.isfinite(v):
                failed += 1
                continue
            best = max(best, abs(v - base) / eps)
        results.append(ProbeResult(int(T), best, failed))
    return results


def save_probe_csv(results: list[ProbeResult], path, seed: int | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "seed", "metric", "value"])
        for r in results:
            w.writerow([r.T, "" if seed is None else seed, "l_hat", repr(r.l_hat)])
            w.writerow([r.T, "" if seed is None else seed, "n_failed", r.n_failed])


# --------------------------------------------------------------------------
# state reconstruction oracle (known synthetic dynamics)
# --------------------------------------------------------------------------


def _backward_state(system: SyntheticSystem, x: Array, u_window: Array,
                    dt: float, substeps: int) -> list[Array]:
    """States x_{n-1}, ..., x_{n-z} by integrating -f with ZOH inputs backwards."""
    cfg = SolverConfig("rk4", substeps, 1.0, dt)
    neg_f = lambda xx, uu: -np.asarray(system.f(xx, uu), dtype=np.float64)
    out = []
    for u in u_window:  # u_window is [u_{n-1}, u_{n-2}, ...]
        x = ode_step(neg_f, x, u, cfg)
        out.append(x)
    return out


def _residual(system: SyntheticSystem, x_hat: Array, u_win: Array, y_win: Array,
              dt: float, substeps: int) -> Array:
    xs = _backward_state(system, x_hat, u_win, dt, substeps)
    return np.concatenate([y_win[p] - np.asarray(system.h(xs[p]), dtype=np.float64)
                           for p in range(len(xs))])


def _gn_minimize(resid, x0: Array, max_iters: int, step_tol: float):
    """Gauss-Newton with backtracking and a Levenberg-damped rescue step.

    Returns (x, cost, converged); converged means the step norm dropped
    below ``step_tol`` or no descent step exists (a stationary point).
    """
    x = np.asarray(x0, dtype=np.float64)
    try:
        r = resid(x)
    except NumericFaultError:
        return x, np.inf, False
    cost = float(r @ r)
    if not np.isfinite(cost):
        return x, np.inf, False

    def try_step(delta):
        nonlocal x, r, cost
        step = 1.0
        for _ in range(12):
            try:
                r_new = resid(x + step * delta)
            except NumericFaultError:
                step *= 0.5
                continue
            c_new = float(r_new @ r_new)
            if np.isfinite(c_new) and c_new < cost:
                x = x + step * delta
                r, cost = r_new, c_new
                return True
            step *= 0.5
        return False

    for _ in range(max_iters):
        try:
            J = _fd_jacobian(resid, x)
        except NumericFaultError:
            return x, cost, False
        if not np.isfinite(J).all():
            return x, cost, False
        delta = np.linalg.lstsq(J, -r, rcond=None)[0]
        if float(np.linalg.norm(delta)) < step_tol:
            return x, cost, True
        if try_step(delta):
            continue
        # the pure GN direction failed: escalate diagonal damping
        JtJ, Jtr = J.T @ J, J.T @ r
        scale = max(float(np.trace(JtJ)) / max(x.size, 1), 1e-12)
        rescued = False
        for lam in (1e-6, 1e-4, 1e-2, 1.0, 1e2):
            delta = np.linalg.solve(JtJ + lam * scale * np.eye(x.size), -Jtr)
            if float(np.linalg.norm(delta)) < step_tol:
                return x, cost, True
            if try_step(delta):
                rescued = True
                break
        if not rescued:
            return x, cost, True  # no descent direction: stationary point
    return x, cost, True


def reconstruct_oracle(
    system: SyntheticSystem, ds: Dataset, n: int, z: int,
    *, substeps: int = 32, state_box: tuple[float, float] = (-3.0, 3.0),
    grid_points: int | None = None, max_iters: int = 100, step_tol: float = 1e-10,
) -> Array:
    """Estimate the true state at index n by nonlinear least squares.

    Minimizes || Y - (h o backward-flow)(x, U) ||_2 over the window of the z
    most recent outputs, by Gauss-Newton from a grid of ~27 starting points
    over ``state_box`` (3 per dimension for three states; denser for fewer).
    Requires z * n_y >= n_x; raises :class:`NoSolutionError` when no start
    converges.
    """
    if z < 1:
        raise InvalidArgumentError("z must be >= 1")
    if z * ds.n_y < system.n_x:
        raise ObservabilityError(
            f"z*n_y = {z * ds.n_y} < n_x = {system.n_x}: state not reconstructible"
        )
    if not (z <= n <= ds.n):
        raise InvalidArgumentError(f"need z <= n <= N, got n={n}")
    u_win = ds.u[n - 1::-1][:z]        # u_{n-1}, u_{n-2}, ..., u_{n-z}
    y_win = ds.y[n - 1::-1][:z]
    resid = lambda x: _residual(system, x, u_win, y_win, ds.dt, substeps)

    if grid_points is None:
        grid_points = max(2, round(27.0 ** (1.0 / system.n_x)))
    lo, hi = state_box
    axes = [np.linspace(lo, hi, grid_points) for _ in range(system.n_x)]
    # a numerically-zero residual is the global minimum; stop the multi-start
    exact_cost = (1e-9 ** 2) * z * ds.n_y
    best_x, best_cost = None, np.inf
    for start in itertools.product(*axes):
        x, cost, converged = _gn_minimize(resid, np.asarray(start), max_iters, step_tol)
        if converged and np.isfinite(cost) and cost < best_cost:
            best_x, best_cost = x, cost
            if best_cost <= exact_cost:
                break
    if best_x is None:
        raise NoSolutionError("Gauss-Newton did not converge from any start")
    return best_x


def _fd_jacobian(resid, x: Array, step: float = 1e-6) -> Array:
    cols = []
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        cols.append((resid(hi) - resid(lo)) / (2.0 * step))
    return np.stack(cols, axis=1)
