"""Config-driven command line front end.

``subnet <command> --config <path> [--out <dir>] [--seed <int>] [--threads <int>]``

Commands: generate | train | eval | sweep-tau | probe-smoothness |
reconstruct | ensemble.  The fully-resolved ("effective") configuration is
echoed to the output directory on every run; re-running from the echo with
the same seed reproduces the artifacts bit-for-bit in single-threaded mode.
Configs are strict JSON: unknown keys and type mismatches are rejected with
the offending JSON path.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import sys
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import evaluation as ev
from .data import (
    Dataset,
    SyntheticConfig,
    fit_normalizer,
    generate_synthetic,
    load_csv,
    make_system,
    save_csv,
    save_truth_csv,
    slice_dataset,
)
from .errors import ConfigError, SubnetError
from .model import init_model
from .ode import SolverConfig
from .serialize import load_model
from .training import TrainConfig, save_history_csv, suggest_tau, train

COMMANDS = ("generate", "train", "eval", "sweep-tau", "probe-smoothness",
            "reconstruct", "ensemble")


# --------------------------------------------------------------------------
# config schema (strict: unknown keys are errors)
# --------------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    test_path: Optional[str] = None
    n_u: int = Field(1, ge=1)
    n_y: int = Field(1, ge=1)
    dt: float = Field(..., gt=0)
    val_fraction: float = Field(0.25, gt=0, lt=1)


class SyntheticSection(_Strict):
    system: Literal["cascaded_tanks", "linear2"] = "cascaded_tanks"
    n_samples: int = Field(1024, ge=2)
    dt: float = Field(4.0, gt=0)
    input: Literal["multisine", "random_steps"] = "multisine"
    seed: Optional[int] = None
    noise_std: float = Field(0.0, ge=0)
    truth_substeps: int = Field(32, ge=10)
    params: dict[str, float] = Field(default_factory=dict)


class ModelSection(_Strict):
    n_x: int = Field(..., ge=1)
    n_a: int = Field(5, ge=0)
    n_b: int = Field(5, ge=0)
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    mode: Literal["ct", "dt"] = "ct"
    seed: Optional[int] = None


class SolverSection(_Strict):
    method: Literal["euler", "rk4"] = "rk4"
    substeps: int = Field(1, ge=1)
    tau: Union[Literal["auto"], float] = "auto"


class TrainSection(_Strict):
    T: int = Field(30, ge=1)
    batch_size: int = Field(64, ge=1)
    max_updates: int = Field(50_000, ge=0)
    eval_every: int = Field(100, ge=1)
    patience: int = Field(20, ge=1)
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    clip_norm: Optional[float] = Field(10.0, gt=0)
    loss_target: Literal["truncated", "full"] = "truncated"


class EvalSection(_Strict):
    model_path: str


class SweepSection(_Strict):
    dt_over_tau: list[float] = Field(
        default_factory=lambda: list(np.logspace(-3, 1, 9)), min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)


class ProbeSection(_Strict):
    T_values: list[int] = Field(default_factory=lambda: [8, 32, 128], min_length=1)
    n_probes: int = Field(32, ge=1)
    eps: float = Field(1e-4, gt=0)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)


class ReconstructSection(_Strict):
    z: int = Field(3, ge=1)
    indices: Optional[list[int]] = None
    n_points: int = Field(20, ge=1)
    substeps: Optional[int] = Field(None, ge=1)
    state_box: tuple[float, float] = (-3.0, 3.0)


class EnsembleSection(_Strict):
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)


class RunConfig(_Strict):
    format_version: int = 1
    command: Optional[Literal[COMMANDS]] = None
    seed: int = 0
    out: Optional[str] = None
    threads: int = Field(1, ge=1)
    data: Optional[DataSection] = None
    synthetic: Optional[SyntheticSection] = None
    model: Optional[ModelSection] = None
    solver: SolverSection = Field(default_factory=SolverSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: Optional[EvalSection] = None
    sweep: SweepSection = Field(default_factory=SweepSection)
    probe: ProbeSection = Field(default_factory=ProbeSection)
    reconstruct: ReconstructSection = Field(default_factory=ReconstructSection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)


def _format_validation_error(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "extra_forbidden":
            lines.append(f"{path}: unknown key")
        else:
            lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(path) -> RunConfig:
    """Load and validate a JSON run configuration.

    Unknown keys and type mismatches raise :class:`ConfigError` naming the
    JSON path; referenced data/model files must exist.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"{path}: {_format_validation_error(e)}") from e
    for label, p in _referenced_paths(cfg):
        if not Path(p).exists():
            raise ConfigError(f"{label}: path {p!r} does not exist")
    return cfg


def _referenced_paths(cfg: RunConfig):
    if cfg.data is not None:
        for label in ("train_path", "val_path", "test_path"):
            p = getattr(cfg.data, label)
            if p is not None:
                yield f"data.{label}", p
    if cfg.eval is not None:
        yield "eval.model_path", cfg.eval.model_path


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _require(cfg: RunConfig, *sections: str) -> None:
    missing = [s for s in sections if getattr(cfg, s) is None]
    if missing:
        raise ConfigError(f"command {cfg.command!r} needs config section(s): {missing}")


def _out_dir(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise ConfigError("no output directory: set 'out' in the config or pass --out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path) -> None:
    (out / "effective_config.json").write_text(
        json.dumps(cfg.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")


def _write_metrics(path: Path, items: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in items.items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])


def _load_splits(cfg: RunConfig) -> tuple[Dataset, Dataset, Optional[Dataset]]:
    """Train/val/test datasets; without val_path the train tail is split off."""
    d = cfg.data
    if d.train_path is None:
        raise ConfigError("data.train_path is required for this command")
    train_ds = load_csv(d.train_path, d.n_u, d.n_y, d.dt)
    test_ds = load_csv(d.test_path, d.n_u, d.n_y, d.dt) if d.test_path else None
    if d.val_path:
        val_ds = load_csv(d.val_path, d.n_u, d.n_y, d.dt)
    else:
        cut = int(round(train_ds.n * (1.0 - d.val_fraction)))
        if not (0 < cut < train_ds.n):
            raise ConfigError("val_fraction leaves an empty train or validation split")
        train_ds, val_ds = slice_dataset(train_ds, 0, cut), slice_dataset(train_ds, cut, train_ds.n)
    return train_ds, val_ds, test_ds


def _resolve_tau(cfg: RunConfig, train_ds: Dataset) -> RunConfig:
    if cfg.solver.tau == "auto":
        rate = suggest_tau(train_ds)
        cfg = cfg.model_copy(deep=True)
        cfg.solver.tau = 1.0 / rate
    return cfg


def _train_cfg(cfg: RunConfig, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        T=t.T, batch_size=t.batch_size, max_updates=t.max_updates,
        eval_every=t.eval_every, patience=t.patience, lr=t.lr,
        beta1=t.beta1, beta2=t.beta2, eps=t.eps, seed=seed,
        mode=cfg.model.mode, loss_target=t.loss_target, clip_norm=t.clip_norm,
    )


def _synth_cfg(cfg: RunConfig) -> SyntheticConfig:
    s = cfg.synthetic
    return SyntheticConfig(
        system=s.system, n_samples=s.n_samples, dt=s.dt, input_kind=s.input,
        seed=cfg.seed if s.seed is None else s.seed,
        noise_std=s.noise_std, truth_substeps=s.truth_substeps, params=dict(s.params),
    )


def _map_cells(fn, payloads, threads: int):
    if threads <= 1 or len(payloads) <= 1:
        return [fn(*p) for p in payloads]
    with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, *zip(*payloads)))


# --------------------------------------------------------------------------
# command handlers
# --------------------------------------------------------------------------


def _cmd_generate(cfg: RunConfig, out: Path) -> RunConfig:
    _require(cfg, "synthetic")
    scfg = _synth_cfg(cfg)
    cfg = cfg.model_copy(deep=True)
    cfg.synthetic.seed = scfg.seed
    ds, trace = generate_synthetic(scfg)
    save_csv(ds, out / "dataset.csv")
    save_truth_csv(ds, trace, out / "truth.csv")
    print(f"wrote {out / 'dataset.csv'} and {out / 'truth.csv'} (N={ds.n})")
    return cfg


def _build_model(cfg: RunConfig, train_ds: Dataset):
    mdl = cfg.model
    solver = SolverConfig(cfg.solver.method, cfg.solver.substeps,
                          float(cfg.solver.tau), train_ds.dt)
    norm = fit_normalizer(train_ds)
    seed = cfg.seed if mdl.seed is None else mdl.seed
    return init_model(mdl.n_x, train_ds.n_u, train_ds.n_y, mdl.n_a, mdl.n_b,
                      solver, norm, mode=mdl.mode, hidden=tuple(mdl.hidden), seed=seed)


def _cmd_train(cfg: RunConfig, out: Path) -> RunConfig:
    _require(cfg, "data", "model")
    train_ds, val_ds, test_ds = _load_splits(cfg)
    cfg = _resolve_tau(cfg, train_ds)
    cfg = cfg.model_copy(deep=True)
    cfg.model.seed = cfg.seed if cfg.model.seed is None else cfg.model.seed
    m0 = _build_model(cfg, train_ds)
    best, hist = train(m0, train_ds, val_ds, _train_cfg(cfg, cfg.seed))
    (out / "model.json").write_text(hist.best_checkpoint + "\n", encoding="utf-8")
    save_history_csv(hist, out / "history.csv")
    metrics = {
        "best_val_rmse": hist.best_val_rmse,
        "best_update": hist.best_update,
        "n_updates": hist.n_updates,
        "stop_reason": hist.stop_reason,
        "dt_over_tau": train_ds.dt / float(cfg.solver.tau),
    }
    if test_ds is not None:
        report = ev.evaluate_model(best, test_ds)
        metrics.update(test_rmse=report.rmse, test_nrmse=report.nrmse,
                       rms_x=report.rms_x, rms_f=report.rms_f)
    _write_metrics(out / "metrics.csv", metrics)
    (out / "run_info.json").write_text(
        json.dumps({"wall_time_s": hist.wall_time}, indent=2) + "\n", encoding="utf-8")
    print(f"best val RMSE {hist.best_val_rmse:.6g} at update {hist.best_update} "
          f"({hist.stop_reason}); artifacts in {out}")
    return cfg


def _cmd_eval(cfg: RunConfig, out: Path) -> RunConfig:
    _require(cfg, "data", "eval")
    if cfg.data.test_path is None:
        raise ConfigError("eval needs data.test_path")
    ds = load_csv(cfg.data.test_path, cfg.data.n_u, cfg.data.n_y, cfg.data.dt)
    m = load_model(cfg.eval.model_path)
    report = ev.evaluate_model(m, ds)
    _write_metrics(out / "metrics.csv", {
        "rmse": report.rmse, "nrmse": report.nrmse,
        "rms_x": report.rms_x, "rms_f": report.rms_f,
        "n_samples": report.n_samples,
    })
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        ny = report.trace.y_meas.shape[1]
        w.writerow(["k"] + [f"y{j}" for j in range(ny)] + [f"y_pred{j}" for j in range(ny)])
        for k in range(report.n_samples):
            row = [report.trace.start + k]
            row += [repr(float(v)) for v in report.trace.y_meas[k]]
            row += [repr(float(v)) for v in report.trace.y_pred[k]]
            w.writerow(row)
    print(f"test RMSE {report.rmse:.6g} (NRMSE {report.nrmse:.4g}) over "
          f"{report.n_samples} samples")
    return cfg


def _cmd_sweep(cfg: RunConfig, out: Path) -> RunConfig:
    _require(cfg, "data", "model")
    train_ds, val_ds, test_ds = _load_splits(cfg)
    if test_ds is None:
        raise ConfigError("sweep-tau needs data.test_path")
    payloads = [
        (train_ds, val_ds, test_ds, float(ratio), int(seed), _train_cfg(cfg, int(seed)),
         cfg.model.n_x, cfg.model.n_a, cfg.model.n_b, tuple(cfg.model.hidden),
         cfg.solver.method, cfg.solver.substeps)
        for ratio in cfg.sweep.dt_over_tau for seed in cfg.sweep.seeds
    ]
    cells = _map_cells(ev.run_cell, payloads, cfg.threads)
    ev.save_sweep_csv(cells, out / "sweep.csv")
    for ratio in cfg.sweep.dt_over_tau:
        vals = [c.test_rmse for c in cells if c.dt_over_tau == float(ratio)]
        print(f"dt/tau={ratio:g}: median test RMSE {np.nanmedian(vals):.6g}")
    return cfg


def _cmd_probe(cfg: RunConfig, out: Path) -> RunConfig:
    _require(cfg, "data", "model")
    train_ds, _, _ = _load_splits(cfg)
    cfg2 = _resolve_tau(cfg, train_ds)
    rows = []
    for seed in cfg.probe.seeds:
        m = _build_model(
            cfg2.model_copy(update={"model": cfg2.model.model_copy(update={"seed": int(seed)})}),
            train_ds)
        results = ev.smoothness_probe(m, train_ds, cfg.probe.T_values,
                                      cfg.probe.n_probes, cfg.probe.eps, seed=int(seed))
        rows += [(r.T, int(seed), r.l_hat, r.n_failed) for r in results]
    with open(out / "probe.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "seed", "metric", "value"])
        for T, seed, l_hat, n_failed in rows:
            w.writerow([T, seed, "l_hat", repr(l_hat)])
            w.writerow([T, seed, "n_failed", n_failed])
    for T in cfg.probe.T_values:
        med = np.median([r[2] for r in rows if r[0] == T])
        print(f"T={T}: median L_hat {med:.6g}")
    return cfg2


def _cmd_reconstruct(cfg: RunConfig, out: Path) -> RunConfig:
    _require(cfg, "synthetic")
    scfg = _synth_cfg(cfg)
    ds, trace = generate_synthetic(scfg)
    system = make_system(scfg)
    r = cfg.reconstruct
    if r.indices is not None:
        indices = [int(i) for i in r.indices]
    else:
        indices = sorted(set(np.linspace(r.z, ds.n - 1, r.n_points).astype(int).tolist()))
    substeps = scfg.truth_substeps if r.substeps is None else r.substeps
    errs = []
    with open(out / "reconstruct.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n_x = system.n_x
        w.writerow(["n"] + [f"x_true{i}" for i in range(n_x)]
                   + [f"x_hat{i}" for i in range(n_x)] + ["err_norm"])
        for n in indices:
            x_hat = ev.reconstruct_oracle(system, ds, n, r.z, substeps=substeps,
                                          state_box=tuple(r.state_box))
            err = float(np.linalg.norm(x_hat - trace.states[n]))
            errs.append(err)
            w.writerow([n] + [repr(float(v)) for v in trace.states[n]]
                       + [repr(float(v)) for v in x_hat] + [repr(err)])
    _write_metrics(out / "metrics.csv", {
        "n_points": len(indices),
        "rms_state_error": float(np.sqrt(np.mean(np.square(errs)))),
        "max_state_error": max(errs),
    })
    print(f"reconstructed {len(indices)} states; RMS error "
          f"{float(np.sqrt(np.mean(np.square(errs)))):.6g}")
    return cfg


def _cmd_ensemble(cfg: RunConfig, out: Path) -> RunConfig:
    _require(cfg, "data", "model")
    train_ds, val_ds, test_ds = _load_splits(cfg)
    if test_ds is None:
        raise ConfigError("ensemble needs data.test_path")
    cfg = _resolve_tau(cfg, train_ds)
    ratio = train_ds.dt / float(cfg.solver.tau)
    payloads = [
        (train_ds, val_ds, test_ds, ratio, int(seed), _train_cfg(cfg, int(seed)),
         cfg.model.n_x, cfg.model.n_a, cfg.model.n_b, tuple(cfg.model.hidden),
         cfg.solver.method, cfg.solver.substeps)
        for seed in cfg.ensemble.seeds
    ]
    cells = _map_cells(ev.run_cell, payloads, cfg.threads)
    with open(out / "ensemble.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "test_rmse", "val_rmse", "rms_x", "rms_f"])
        for c in cells:
            w.writerow([c.seed, repr(c.test_rmse), repr(c.val_rmse),
                        repr(c.rms_x), repr(c.rms_f)])
    rmses = np.array([c.test_rmse for c in cells])
    # best RMSE with the ensemble mean in parentheses, as benchmark tables report
    _write_metrics(out / "metrics.csv", {
        "best_test_rmse": float(np.nanmin(rmses)),
        "mean_test_rmse": float(np.nanmean(rmses)),
        "n_models": len(cells),
    })
    print(f"ensemble of {len(cells)}: best test RMSE {np.nanmin(rmses):.6g} "
          f"({np.nanmean(rmses):.6g})")
    return cfg


_HANDLERS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep-tau": _cmd_sweep,
    "probe-smoothness": _cmd_probe,
    "reconstruct": _cmd_reconstruct,
    "ensemble": _cmd_ensemble,
}


def run(cfg: RunConfig) -> int:
    """Dispatch a validated config; returns a process exit status."""
    if cfg.command is None:
        raise ConfigError("no command given (set 'command' in the config)")
    out = _out_dir(cfg)
    effective = _HANDLERS[cfg.command](cfg, out)
    _echo_config(effective, out)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="subnet",
        description="Continuous-time state-space identification with subspace encoders.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes for sweep-tau/ensemble")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if cfg.command is not None and cfg.command != args.command:
            raise ConfigError(
                f"config command {cfg.command!r} does not match subcommand {args.command!r}")
        updates = {"command": args.command}
        if args.out is not None:
            updates["out"] = args.out
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.threads is not None:
            updates["threads"] = args.threads
        cfg = cfg.model_copy(update=updates)
        return run(cfg)
    except SubnetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
