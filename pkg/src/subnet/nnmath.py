"""Dense tanh feedforward networks with exact reverse-mode gradients and Adam.

Everything is plain float64 numpy.  Parameters are immutable value objects;
forward/backward are pure functions, so sharing parameters across threads is
safe.  Functions accept a single input vector ``(n,)`` or a batch ``(B, n)``
and return matching shapes.

Weight convention: layer ``i`` computes ``a @ W_i.T + b_i`` with ``W_i`` of
shape ``(fan_out, fan_in)``.  The optional linear bypass has shape
``(input_dim, output_dim)`` and adds ``x @ bypass`` to the final output.
Flattened layout order is ``W0, b0, W1, b1, ..., bypass``, each ravelled
row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericFaultError

Array = np.ndarray


# --------------------------------------------------------------------------
# parameter containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MLPParams:
    """Weights of one tanh MLP, optionally with a linear input->output bypass."""

    weights: tuple[Array, ...]
    biases: tuple[Array, ...]
    bypass: Array | None = None

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise InvalidArgumentError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise InvalidArgumentError(f"layer {i}: weight/bias shapes do not compose")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidArgumentError(f"layer {i}: fan_in does not match previous fan_out")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise InvalidArgumentError(f"layer {i}: non-finite parameter entries")
        if self.bypass is not None:
            if self.bypass.shape != (self.input_dim, self.output_dim):
                raise InvalidArgumentError(
                    f"bypass must be (input_dim, output_dim)=({self.input_dim}, {self.output_dim}),"
                    f" got {self.bypass.shape}"
                )
            if not np.isfinite(self.bypass).all():
                raise InvalidArgumentError("bypass has non-finite entries")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        n = sum(w.size + b.size for w, b in zip(self.weights, self.biases))
        return n + (self.bypass.size if self.bypass is not None else 0)


@dataclass(frozen=True)
class FlatParams:
    """A parameter vector plus the layout needed to rebuild the structure.

    ``layout`` is an ordered tuple of ``(name, shape)`` pairs; the vector is
    the concatenation of the row-major ravel of each segment.
    """

    values: Array
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        expected = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise InvalidArgumentError(
                f"flat vector length {self.values.size} does not match layout total {expected}"
            )

    def segment(self, name: str) -> slice:
        """Slice of ``values`` occupied by the named segment."""
        off = 0
        for seg_name, shape in self.layout:
            size = int(np.prod(shape))
            if seg_name == name:
                return slice(off, off + size)
            off += size
        raise InvalidArgumentError(f"no segment named {name!r}")

    def with_values(self, values: Array) -> "FlatParams":
        return FlatParams(np.asarray(values, dtype=np.float64), self.layout)


def flatten_mlp(p: MLPParams, prefix: str = "") -> FlatParams:
    """Flatten to a vector; order W0, b0, W1, b1, ..., bypass."""
    parts, layout = [], []
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        parts += [w.ravel(), b]
        layout += [(f"{prefix}W{i}", w.shape), (f"{prefix}b{i}", b.shape)]
    if p.bypass is not None:
        parts.append(p.bypass.ravel())
        layout.append((f"{prefix}bypass", p.bypass.shape))
    return FlatParams(np.concatenate(parts) if parts else np.zeros(0), tuple(layout))


def unflatten_mlp(flat: FlatParams, prefix: str = "") -> MLPParams:
    """Inverse of :func:`flatten_mlp`; exact round-trip."""
    weights, biases, bypass = [], [], None
    off = 0
    for name, shape in flat.layout:
        size = int(np.prod(shape))
        seg = flat.values[off:off + size].reshape(shape)
        off += size
        if not name.startswith(prefix):
            raise InvalidArgumentError(f"segment {name!r} does not match prefix {prefix!r}")
        kind = name[len(prefix):]
        if kind.startswith("W"):
            weights.append(seg.copy())
        elif kind.startswith("b") and kind != "bypass":
            biases.append(seg.copy())
        elif kind == "bypass":
            bypass = seg.copy()
        else:
            raise InvalidArgumentError(f"unrecognized segment name {name!r}")
    return MLPParams(tuple(weights), tuple(biases), bypass)


class MLPGrads:
    """Mutable gradient accumulator mirroring the shapes of an MLPParams."""

    def __init__(self, p: MLPParams):
        self.weights = [np.zeros_like(w) for w in p.weights]
        self.biases = [np.zeros_like(b) for b in p.biases]
        self.bypass = np.zeros_like(p.bypass) if p.bypass is not None else None

    def to_flat(self, p: MLPParams, prefix: str = "") -> FlatParams:
        g = MLPParams(tuple(self.weights), tuple(self.biases), self.bypass)
        return flatten_mlp(g, prefix)


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


def mlp_init(
    layer_sizes: list[int],
    with_bypass: bool,
    rng_seed: int | np.random.Generator,
) -> MLPParams:
    """Xavier-uniform weights, zero biases; deterministic given the seed.

    ``rng_seed`` may be an integer (a fresh PCG64 generator is created) or an
    already-seeded ``numpy`` Generator, so callers can derive several networks
    from one seed sequence.
    """
    if len(layer_sizes) < 2 or any(int(s) < 1 for s in layer_sizes):
        raise InvalidArgumentError(f"layer_sizes must have >= 2 positive entries, got {layer_sizes}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    bypass = None
    if with_bypass:
        n_in, n_out = layer_sizes[0], layer_sizes[-1]
        limit = np.sqrt(6.0 / (n_in + n_out))
        bypass = rng.uniform(-limit, limit, size=(n_in, n_out))
    return MLPParams(tuple(weights), tuple(biases), bypass)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

# cache layout: (input batch, [tanh outputs per hidden layer])
MLPCache = tuple[Array, list[Array]]


def _as_batch(x, dim: int, what: str) -> tuple[Array, bool]:
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != dim:
        raise InvalidArgumentError(f"{what} must have {dim} entries, got shape {np.shape(x)}")
    return a, single


def mlp_forward_cached(p: MLPParams, x: Array) -> tuple[Array, MLPCache]:
    """Batched forward pass keeping the activations needed for backprop."""
    a = x
    hidden = []
    for w, b in zip(p.weights[:-1], p.biases[:-1]):
        a = np.tanh(a @ w.T + b)
        hidden.append(a)
    y = a @ p.weights[-1].T + p.biases[-1]
    if p.bypass is not None:
        y = y + x @ p.bypass
    return y, (x, hidden)


def mlp_backward_cached(p: MLPParams, cache: MLPCache, gy: Array, acc: MLPGrads) -> Array:
    """Reverse pass from a cached forward; accumulates parameter grads into ``acc``.

    Returns the gradient with respect to the input batch.  Parameter
    gradients are summed over the batch dimension.
    """
    x, hidden = cache
    acts = [x] + hidden
    g = gy
    acc.weights[-1] += g.T @ acts[-1]
    acc.biases[-1] += g.sum(axis=0)
    g = g @ p.weights[-1]
    for i in range(len(hidden) - 1, -1, -1):
        g = g * (1.0 - hidden[i] * hidden[i])
        acc.weights[i] += g.T @ acts[i]
        acc.biases[i] += g.sum(axis=0)
        g = g @ p.weights[i]
    if p.bypass is not None:
        acc.bypass += x.T @ gy
        g = g + gy @ p.bypass.T
    return g


def mlp_forward(p: MLPParams, x) -> Array:
    """y = W_L tanh(... tanh(W_1 x + b_1) ...) + b_L  (+ bypass^T x)."""
    a, single = _as_batch(x, p.input_dim, "input")
    y, _ = mlp_forward_cached(p, a)
    return y[0] if single else y


def mlp_backward(p: MLPParams, x, upstream_grad) -> tuple[Array, FlatParams]:
    """Exact VJP of :func:`mlp_forward`.

    Returns the gradient of ``upstream_grad . output`` with respect to the
    input and, flattened, with respect to every parameter.
    """
    a, single = _as_batch(x, p.input_dim, "input")
    g, gsingle = _as_batch(upstream_grad, p.output_dim, "upstream_grad")
    if a.shape[0] != g.shape[0]:
        raise InvalidArgumentError("input and upstream_grad batch sizes differ")
    _, cache = mlp_forward_cached(p, a)
    acc = MLPGrads(p)
    gx = mlp_backward_cached(p, cache, g, acc)
    return (gx[0] if single and gsingle else gx), acc.to_flat(p)


def lipschitz_upper_bound(p: MLPParams) -> float:
    """Crude global Lipschitz bound: product of layer Frobenius norms plus bypass norm.

    Valid because tanh is 1-Lipschitz and ||W x|| <= ||W||_F ||x||.
    """
    bound = 1.0
    for w in p.weights:
        bound *= float(np.linalg.norm(w))
    if p.bypass is not None:
        bound += float(np.linalg.norm(p.bypass))
    return bound


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    """First/second moment state of the Adam optimizer (bias-corrected form)."""

    m: Array
    v: Array
    step: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.m.shape != self.v.shape or self.step < 0:
            raise InvalidArgumentError("moment vectors must match and step must be >= 0")
        if min(self.lr, self.eps) <= 0 or not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidArgumentError("Adam hyperparameters out of range")


def adam_init(n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(s: AdamState, theta: FlatParams, grad: FlatParams) -> tuple[AdamState, FlatParams]:
    """One bias-corrected Adam update; returns the new state and parameters."""
    if theta.values.shape != grad.values.shape or theta.values.shape != s.m.shape:
        raise InvalidArgumentError("theta/grad/state lengths differ")
    g = grad.values
    if not np.isfinite(g).all():
        raise NumericFaultError("non-finite gradient entries", n_bad=int((~np.isfinite(g)).sum()))
    t = s.step + 1
    m = s.beta1 * s.m + (1.0 - s.beta1) * g
    v = s.beta2 * s.v + (1.0 - s.beta2) * g * g
    m_hat = m / (1.0 - s.beta1 ** t)
    v_hat = v / (1.0 - s.beta2 ** t)
    new_theta = theta.values - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
    return AdamState(m, v, t, s.lr, s.beta1, s.beta2, s.eps), theta.with_values(new_theta)


# --------------------------------------------------------------------------
# finite differences (testing oracle)
# --------------------------------------------------------------------------


def finite_diff_gradient(loss_fn, theta: FlatParams, step: float) -> FlatParams:
    """Central-difference gradient of a scalar function of FlatParams."""
    if step <= 0:
        raise InvalidArgumentError("step must be positive")
    base = theta.values
    out = np.zeros_like(base)
    for i in range(base.size):
        hi = base.copy()
        lo = base.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = float(loss_fn(theta.with_values(hi)))
        f_lo = float(loss_fn(theta.with_values(lo)))
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NumericFaultError("loss non-finite during finite differences", coordinate=i)
        out[i] = (f_hi - f_lo) / (2.0 * step)
    return theta.with_values(out)
