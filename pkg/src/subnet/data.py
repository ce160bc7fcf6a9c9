"""Datasets: CSV ingestion, normalization, subsection indices, batching,
and synthetic benchmark generation with known ground truth.

CSV contract: UTF-8, header row naming the channels ``u0,...,u{n_u-1},
y0,...,y{n_y-1}`` (extra columns are ignored so truth exports re-load as
plain datasets), decimal-point floats, LF or CRLF line endings, lines
starting with ``#`` skipped.  Floats are written with ``repr`` so a
save/load round-trip is value-exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateDataError,
    GenerationError,
    InvalidArgumentError,
    ParseError,
)
from .ode import SolverConfig, ode_step

Array = np.ndarray


# --------------------------------------------------------------------------
# core containers
# --------------------------------------------------------------------------


def _readonly(a: Array) -> Array:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Sampled input/output record with a fixed sample period (seconds)."""

    u: Array
    y: Array
    dt: float
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "u", _readonly(np.atleast_2d(self.u).T if np.ndim(self.u) == 1 else self.u))
        object.__setattr__(self, "y", _readonly(np.atleast_2d(self.y).T if np.ndim(self.y) == 1 else self.y))
        if self.u.ndim != 2 or self.y.ndim != 2 or self.u.shape[0] != self.y.shape[0]:
            raise InvalidArgumentError("u and y must be (N, n_u) and (N, n_y) with equal N")
        if self.u.shape[0] < 1:
            raise InvalidArgumentError("dataset must contain at least one sample")
        if not (np.isfinite(self.u).all() and np.isfinite(self.y).all()):
            raise InvalidArgumentError("dataset contains non-finite entries")
        if not self.dt > 0:
            raise InvalidArgumentError("dt must be positive")

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]


def slice_dataset(ds: Dataset, start: int, stop: int) -> Dataset:
    """Contiguous sub-record; used for validation splits."""
    if not (0 <= start < stop <= ds.n):
        raise InvalidArgumentError(f"invalid slice [{start}, {stop}) for N={ds.n}")
    return Dataset(ds.u[start:stop].copy(), ds.y[start:stop].copy(), ds.dt,
                   f"{ds.name}[{start}:{stop}]")


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and (population) standard deviation of u and y."""

    u_mean: Array
    u_std: Array
    y_mean: Array
    y_std: Array

    def __post_init__(self):
        for label in ("u_mean", "u_std", "y_mean", "y_std"):
            object.__setattr__(self, label, _readonly(np.atleast_1d(getattr(self, label))))
        if (self.u_std <= 0).any() or (self.y_std <= 0).any():
            raise InvalidArgumentError("all standard deviations must be positive")

    @staticmethod
    def identity(n_u: int, n_y: int) -> "NormStats":
        """No-op normalization (mean 0, std 1); handy for wrapped ground truth."""
        return NormStats(np.zeros(n_u), np.ones(n_u), np.zeros(n_y), np.ones(n_y))


def fit_normalizer(ds: Dataset) -> NormStats:
    """Per-channel z-score statistics; rejects zero-variance channels."""
    u_std = ds.u.std(axis=0)
    y_std = ds.y.std(axis=0)
    for kind, std in (("u", u_std), ("y", y_std)):
        for c, s in enumerate(std):
            if s == 0.0:
                raise DegenerateDataError(f"channel {kind}[{c}] has zero variance")
    return NormStats(ds.u.mean(axis=0), u_std, ds.y.mean(axis=0), y_std)


def normalize_dataset(ds: Dataset, stats: NormStats) -> Dataset:
    return Dataset((ds.u - stats.u_mean) / stats.u_std,
                   (ds.y - stats.y_mean) / stats.y_std, ds.dt, ds.name)


def denormalize_y(y_norm: Array, stats: NormStats) -> Array:
    return y_norm * stats.y_std + stats.y_mean


# --------------------------------------------------------------------------
# CSV input/output
# --------------------------------------------------------------------------


def _column_names(n_u: int, n_y: int) -> list[str]:
    return [f"u{i}" for i in range(n_u)] + [f"y{i}" for i in range(n_y)]


def load_csv(path, n_u: int, n_y: int, dt: float) -> Dataset:
    """Read a dataset; parse failures report the offending row and column."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: file does not exist")
    required = _column_names(n_u, n_y)
    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        try:
            cols = [header.index(name) for name in required]
        except ValueError as e:
            missing = [name for name in required if name not in header]
            raise ParseError(f"{path}: missing columns {missing}") from e
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            vals = []
            for name, c in zip(required, cols):
                if c >= len(row):
                    raise ParseError(f"{path}: row {r}: missing value in column {name!r}")
                try:
                    vals.append(float(row[c]))
                except ValueError:
                    raise ParseError(
                        f"{path}: row {r}, column {name!r}: not a number: {row[c]!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    return Dataset(arr[:, :n_u], arr[:, n_u:], dt, name=path.stem)


def _write_rows(path, header: list[str], columns: list[Array]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(columns[0].shape[0]):
            w.writerow([repr(float(col[k])) for col in columns])


def save_csv(ds: Dataset, path) -> None:
    cols = [ds.u[:, i] for i in range(ds.n_u)] + [ds.y[:, j] for j in range(ds.n_y)]
    _write_rows(path, _column_names(ds.n_u, ds.n_y), cols)


# --------------------------------------------------------------------------
# subsection bookkeeping and batching
# --------------------------------------------------------------------------


def valid_start_indices(N: int, T: int, n_a: int, n_b: int) -> Array:
    """All legal subsection starts: max(n_a, n_b) ... N - T inclusive."""
    if min(N, T) < 0 or min(n_a, n_b) < 0:
        raise InvalidArgumentError("N, T, n_a, n_b must be nonnegative")
    lag = max(n_a, n_b)
    if N < T + lag:
        raise InvalidArgumentError(f"N={N} too small for T={T} with encoder lag {lag}")
    return np.arange(lag, N - T + 1, dtype=np.int64)


class BatchSampler:
    """Uniform batches without replacement: one shuffled epoch consumed in chunks.

    The final chunk of an epoch may be short; the next call reshuffles.
    Deterministic given the generator's seed.
    """

    def __init__(self, indices, batch_size: int, rng: np.random.Generator):
        self.indices = np.asarray(indices, dtype=np.int64)
        if self.indices.size == 0:
            raise InvalidArgumentError("indices must be nonempty")
        if batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        self.batch_size = batch_size
        self.rng = rng
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def sample_batch(self) -> Array:
        if self._pos >= self._perm.size:
            self._perm = self.rng.permutation(self.indices)
            self._pos = 0
        out = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def sample_batch(indices, batch_size: int, rng: np.random.Generator) -> Array:
    """One uniform draw without replacement (the first chunk of a fresh epoch)."""
    return BatchSampler(indices, batch_size, rng).sample_batch()


# --------------------------------------------------------------------------
# synthetic benchmarks
# --------------------------------------------------------------------------


TANKS_DEFAULTS = {
    "k1": 0.5, "k2": 0.4, "k4": 1.0, "x_max": 10.0,
    "x01": 0.0, "x02": 0.0,
    "input_offset": 0.9, "input_scale": 0.5,
}

LINEAR2_DEFAULTS = {
    "a11": 0.0, "a12": 1.0, "a21": -0.25, "a22": -0.3,
    "b1": 0.0, "b2": 1.0, "c1": 1.0, "c2": 0.0,
    "x01": 0.0, "x02": 0.0,
    "input_offset": 0.0, "input_scale": 1.0,
}

_SYSTEMS = ("cascaded_tanks", "linear2")
_INPUTS = ("multisine", "random_steps")


@dataclass(frozen=True)
class SyntheticConfig:
    """Recipe for one synthetic record (system, excitation, noise, solver grain)."""

    system: str = "cascaded_tanks"
    n_samples: int = 1024
    dt: float = 4.0
    input_kind: str = "multisine"
    seed: int = 0
    noise_std: float = 0.0
    truth_substeps: int = 32
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.system not in _SYSTEMS:
            raise InvalidArgumentError(f"system must be one of {_SYSTEMS}")
        if self.input_kind not in _INPUTS:
            raise InvalidArgumentError(f"input must be one of {_INPUTS}")
        if self.n_samples < 2 or self.dt <= 0 or self.noise_std < 0:
            raise InvalidArgumentError("need n_samples >= 2, dt > 0, noise_std >= 0")
        if self.truth_substeps < 10:
            raise InvalidArgumentError("truth_substeps must be >= 10")


@dataclass(frozen=True)
class SyntheticSystem:
    """Ground-truth dynamics in raw units: dx/dt = f(x, u), y = h(x)."""

    name: str
    n_x: int
    n_u: int
    n_y: int
    f: callable
    h: callable
    x0: Array
    clamp: tuple[float, float] | None = None
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TruthTrace:
    """Noiseless ground truth recorded alongside a generated dataset."""

    states: Array   # (N, n_x) at the sample instants
    y_clean: Array  # (N, n_y)


def make_system(cfg: SyntheticConfig) -> SyntheticSystem:
    if cfg.system == "cascaded_tanks":
        p = {**TANKS_DEFAULTS, **cfg.params}
        k1, k2, k4 = p["k1"], p["k2"], p["k4"]

        def f(x, u):
            r1 = np.sqrt(max(x[0], 0.0))
            r2 = np.sqrt(max(x[1], 0.0))
            return np.array([-k1 * r1 + k4 * u[0], k1 * r1 - k2 * r2])

        def h(x):
            return np.array([x[1]])

        return SyntheticSystem("cascaded_tanks", 2, 1, 1, f, h,
                               np.array([p["x01"], p["x02"]]),
                               clamp=(0.0, p["x_max"]), params=p)

    p = {**LINEAR2_DEFAULTS, **cfg.params}
    A = np.array([[p["a11"], p["a12"]], [p["a21"], p["a22"]]])
    B = np.array([p["b1"], p["b2"]])
    C = np.array([p["c1"], p["c2"]])
    return SyntheticSystem(
        "linear2", 2, 1, 1,
        lambda x, u: A @ x + B * u[0],
        lambda x: np.array([C @ x]),
        np.array([p["x01"], p["x02"]]),
        params=p,
    )


def _multisine(n: int, dt: float, rng: np.random.Generator, n_sines: int = 20) -> Array:
    """Unit-std multisine over the [0, 0.3/dt] Hz band with random phases."""
    f_max = 0.3 / dt
    freqs = f_max * np.arange(1, n_sines + 1) / n_sines
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_sines)
    t = np.arange(n) * dt
    sig = np.cos(2.0 * np.pi * freqs[None, :] * t[:, None] + phases[None, :]).sum(axis=1)
    return sig / sig.std()

def _random_steps(n: int, rng: np.random.Generator) -> Array:
    """Piecewise-constant levels in [-1, 1], hold 5..20 samples; unit-ish scale."""
    sig = np.empty(n)
    k = 0
    while k < n:
        hold = int(rng.integers(5, 21))
        sig[k:k + hold] = rng.uniform(-1.0, 1.0)
        k += hold
    return sig


def generate_input(cfg: SyntheticConfig, system: SyntheticSystem,
                   rng: np.random.Generator) -> Array:
    base = (_multisine(cfg.n_samples, cfg.dt, rng) if cfg.input_kind == "multisine"
            else _random_steps(cfg.n_samples, rng))
    p = system.params
    return (p["input_offset"] + p["input_scale"] * base)[:, None]


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Dataset, TruthTrace]:
    """Integrate the chosen system under a seeded excitation and add output noise.

    Integration is RK4 with ``truth_substeps`` sub-intervals per sample under
    ZOH input; tank states are clamped to the overflow box after every
    sub-interval.
    """
    system = make_system(cfg)
    input_rng, noise_rng = [np.random.default_rng(s)
                            for s in np.random.SeedSequence(cfg.seed).spawn(2)]
    u = generate_input(cfg, system, input_rng)

    sub_cfg = SolverConfig("rk4", 1, 1.0, cfg.dt / cfg.truth_substeps)
    x = system.x0.astype(np.float64)
    states = np.empty((cfg.n_samples, system.n_x))
    for k in range(cfg.n_samples):
        states[k] = x
        if k == cfg.n_samples - 1:
            break
        for _ in range(cfg.truth_substeps):
            x = ode_step(system.f, x, u[k], sub_cfg)
            if system.clamp is not None:
                x = np.clip(x, system.clamp[0], system.clamp[1])
        if not np.isfinite(x).all() or np.abs(x).max() > 1e9:
            raise GenerationError(f"trajectory diverged at sample {k + 1}")

    y_clean = np.stack([system.h(states[k]) for k in range(cfg.n_samples)])
    noise = noise_rng.standard_normal(y_clean.shape) * cfg.noise_std
    ds = Dataset(u, y_clean + noise, cfg.dt, name=f"{cfg.system}-seed{cfg.seed}")
    return ds, TruthTrace(_readonly(states), _readonly(y_clean))


def save_truth_csv(ds: Dataset, trace: TruthTrace, path) -> None:
    """Dataset CSV plus x0,x1,... state columns and y_clean0,... columns."""
    header = _column_names(ds.n_u, ds.n_y)
    cols = [ds.u[:, i] for i in range(ds.n_u)] + [ds.y[:, j] for j in range(ds.n_y)]
    n_x = trace.states.shape[1]
    header += [f"x{i}" for i in range(n_x)]
    cols += [trace.states[:, i] for i in range(n_x)]
    header += [f"y_clean{j}" for j in range(ds.n_y)]
    cols += [trace.y_clean[:, j] for j in range(ds.n_y)]
    _write_rows(path, header, cols)
