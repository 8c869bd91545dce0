"""Dense layers with hand-written backprop, Adam, and a gradient checker.

Everything runs in float64. Arrays are numpy ``ndarray`` objects; a
"Tensor2" is just a 2-D array with rows = batch.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError

ACTIVATIONS = ("identity", "silu", "relu")


def make_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Return a generator for a named stream of a run seed.

    Streams ("init", "noise", "pairs", "posterior", ...) are independent of
    each other; ``extra`` integers further split a stream, e.g. per image.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode())]
    key.extend(int(e) & 0xFFFFFFFF for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "silu":
        return z * _sigmoid(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation evaluated at the pre-activation ``z``."""
    if kind == "identity":
        return np.ones_like(z)
    if kind == "silu":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class DenseLayer:
    """``y = act(x @ weight.T + bias)`` with ``weight`` of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "silu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, activation="silu"):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in))
        return cls(w, np.zeros(n_out), activation)

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


def mlp(sizes: Sequence[int], rng: np.random.Generator, activation="silu",
        last_activation="identity") -> list[DenseLayer]:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = last_activation if i == len(sizes) - 2 else activation
        layers.append(DenseLayer.init(a, b, rng, act))
    return layers


@dataclass
class ForwardCache:
    layers: list[DenseLayer]
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    output_shape: tuple[int, ...]
    weight_ids: tuple[int, ...] = ()


def forward(layers: Sequence[DenseLayer], x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run ``x`` through ``layers``; returns the output and a cache for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D input, got shape {x.shape}")
    inputs, preacts = [], []
    h = x
    for k, layer in enumerate(layers):
        if h.shape[1] != layer.n_in:
            raise ShapeError(
                f"layer {k} expects {layer.n_in} inputs, got {h.shape[1]}"
            )
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        preacts.append(z)
        h = activate(z, layer.activation)
    cache = ForwardCache(list(layers), inputs, preacts, h.shape,
                         tuple(id(l.weight) for l in layers))
    return h, cache


def backward(cache: ForwardCache, upstream: np.ndarray):
    """Backpropagate ``upstream`` (dL/d output) through a cached forward pass.

    Returns ``(grads, dx)`` where ``grads`` is a list of ``(dW, db)`` pairs,
    one per layer, and ``dx`` is the gradient w.r.t. the forward input.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.output_shape:
        raise StateError(
            f"upstream gradient {upstream.shape} does not match cached output "
            f"{cache.output_shape}"
        )
    if tuple(id(l.weight) for l in cache.layers) != cache.weight_ids:
        raise StateError("layer weights were replaced after the forward pass")
    grads = [None] * len(cache.layers)
    g = upstream
    for k in range(len(cache.layers) - 1, -1, -1):
        layer = cache.layers[k]
        dz = g * activate_grad(cache.preacts[k], layer.activation)
        grads[k] = (dz.T @ cache.inputs[k], dz.sum(axis=0))
        g = dz @ layer.weight
    return grads, g


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: OptimState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state was built for a different parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"param {p.shape} vs grad {np.shape(g)}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    flagged: list[tuple[int, tuple[int, ...], float, float]]
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def finite_diff_check(
    loss_fn: Callable[[Sequence[np.ndarray]], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-7,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` and be deterministic.
    Parameters are perturbed in place and restored. The relative error of an
    entry is ``|a - n| / max(|a|, |n|, floor)``. If ``max_entries`` is set,
    only that many randomly chosen entries per parameter are probed.
    """
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss}")
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    rng = rng if rng is not None else np.random.default_rng(0)
    errors, flagged = [], []
    for pi, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {pi} has shape {g.shape}, param {p.shape}")
        if not p.flags.c_contiguous:
            raise ShapeError(f"param {pi} must be C-contiguous to be perturbed in place")
        idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            idx = rng.choice(p.size, size=max_entries, replace=False)
        worst = 0.0
        flat = p.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp, _ = loss_fn(params)
            flat[i] = old - h
            lm, _ = loss_fn(params)
            flat[i] = old
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError("loss became non-finite under perturbation")
            num = (lp - lm) / (2.0 * h)
            ana = g.reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            if rel > tolerance:
                flagged.append((pi, np.unravel_index(i, p.shape), ana, num))
        errors.append(worst)
    return GradCheckReport(errors, flagged, tolerance)
