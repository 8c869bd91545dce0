"""Noise schedule, forward noising, an MLP epsilon-denoiser and DDIM steps.

Images are handled as flattened float64 vectors; a batch is an array of
shape ``(B, H*W)``. Step indices run from 0 (clean) to ``T``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndkernel as nd
from .errors import (CheckpointError, ParameterError, ShapeError,
                     TrainingDivergenceError)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
IMAGE_SHAPE = (16, 16)
N_TIME_FEATURES = 16


@dataclass
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    alpha_bar: np.ndarray
    ddim_subset: np.ndarray

    def with_subset(self, n_steps: int) -> "NoiseSchedule":
        return NoiseSchedule(self.T, self.beta_start, self.beta_end,
                             self.alpha_bar, ddim_subset(self.T, n_steps))


def ddim_subset(T: int, n_steps: int) -> np.ndarray:
    """Evenly spaced, strictly increasing steps in ``1..T`` ending at ``T``."""
    if not 1 <= n_steps <= T:
        raise ParameterError(f"need 1 <= n_steps <= T, got {n_steps} for T={T}")
    steps = np.round(np.linspace(T / n_steps, T, n_steps)).astype(int)
    return np.unique(np.clip(steps, 1, T))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  n_ddim_steps: int = 50) -> NoiseSchedule:
    """Linear-beta schedule with ``alpha_bar[t] = prod_{s<=t} (1 - beta_s)``.

    ``beta_start = beta_end = 0`` is accepted as the noiseless degenerate case.
    """
    if T < 2:
        raise ParameterError(f"T must be at least 2, got {T}")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T, float(beta_start), float(beta_end), alpha_bar,
                         ddim_subset(T, min(n_ddim_steps, T)))


def forward_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Draw ``x_t`` given clean ``x0`` and standard-normal ``eps``.

    ``t`` may be a scalar or one step per row of a batch.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ParameterError(f"step out of range 0..{sched.T}")
    ab = sched.alpha_bar[t]
    if ab.ndim == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def time_embedding(t, T: int, n_features: int = N_TIME_FEATURES) -> np.ndarray:
    """Sin/cos features of ``t/T`` at octave-spaced frequencies; shape (B, n)."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.pi * 2.0 ** np.arange(n_features // 2)
    ang = s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserModel:
    """Time-conditioned MLP predicting the injected noise.

    ``trunk`` maps ``[c_in(t) x_t, time features]`` to a hidden vector ``h``;
    ``head`` is a single linear layer and is the part treated as Bayesian
    by the Laplace fit. The prediction is

        eps_theta(x_t, t) = head(h) + c_skip(t) x_t

    where, for data of per-pixel std ``s`` and ``v = ab s^2 + 1 - ab``,
    ``c_in = 1/sqrt(v)`` and ``c_skip = sqrt(1 - ab)/v`` (the linear
    least-squares noise estimate). With ``data_std=None`` both are dropped
    and the model is a plain MLP.
    """

    trunk: list[nd.DenseLayer]
    head: nd.DenseLayer
    T: int
    image_shape: tuple[int, int] = IMAGE_SHAPE
    n_time_features: int = N_TIME_FEATURES
    data_std: float | None = None
    alpha_bar: np.ndarray | None = None
    laplace: object = None  # LaplacePosterior, attached after fit_lllla

    def __post_init__(self):
        n_pix = int(np.prod(self.image_shape))
        if self.trunk[0].n_in != n_pix + self.n_time_features:
            raise ShapeError("trunk input must be pixels + time features")
        for a, b in zip(self.trunk[:-1], self.trunk[1:]):
            if a.n_out != b.n_in:
                raise ShapeError("trunk layer dimensions do not chain")
        if self.head.n_in != self.trunk[-1].n_out or self.head.n_out != n_pix:
            raise ShapeError("head must map hidden width to pixel count")
        if self.head.activation != "identity":
            raise ShapeError("the head must be linear")
        if self.data_std is not None and self.alpha_bar is None:
            raise ShapeError("preconditioning needs the schedule's alpha_bar")

    @classmethod
    def init(cls, T: int, rng: np.random.Generator, hidden: Sequence[int] = (256, 256),
             image_shape=IMAGE_SHAPE, n_time_features: int = N_TIME_FEATURES,
             activation: str = "silu", data_std: float | None = None,
             alpha_bar: np.ndarray | None = None):
        n_pix = int(np.prod(image_shape))
        sizes = [n_pix + n_time_features, *hidden]
        trunk = nd.mlp(sizes, rng, activation, last_activation=activation)
        head = nd.DenseLayer.init(sizes[-1], n_pix, rng, "identity")
        return cls(trunk, head, T, tuple(image_shape), n_time_features, data_std, alpha_bar)

    @property
    def n_pixels(self) -> int:
        return self.head.n_out

    @property
    def layers(self) -> list[nd.DenseLayer]:
        return [*self.trunk, self.head]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def _coefs(self, t):
        if self.data_std is None:
            return 1.0, 0.0
        ab = self.alpha_bar[t]
        if np.ndim(ab) == 1:
            ab = ab[:, None]
        var = ab * self.data_std ** 2 + 1.0 - ab
        return 1.0 / np.sqrt(var), np.sqrt(1.0 - ab) / var

    def _prep(self, x_t, t):
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        if x_t.shape[1] != self.n_pixels:
            raise ShapeError(f"expected {self.n_pixels} pixels, got {x_t.shape[1]}")
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        c_in, c_skip = self._coefs(t)
        inp = np.concatenate([c_in * x_t, time_embedding(t, self.T, self.n_time_features)],
                             axis=1)
        return inp, c_skip * x_t

    def hidden(self, x_t, t) -> np.ndarray:
        """Trunk output ``h``: the features the Bayesian head acts on."""
        inp, _ = self._prep(x_t, t)
        h, _ = nd.forward(self.trunk, inp)
        return h

    def skip(self, x_t, t) -> np.ndarray:
        """The parameter-free part of the prediction, ``c_skip(t) x_t``."""
        return self._prep(x_t, t)[1]

    def predict_eps(self, x_t, t) -> np.ndarray:
        inp, skip = self._prep(x_t, t)
        out, _ = nd.forward(self.layers, inp)
        return out + skip

    def loss_and_grads(self, x0, t, eps, sched: NoiseSchedule):
        """Mean squared noise-prediction error and its gradient for every param."""
        x_t = forward_sample(x0, t, eps, sched)
        inp, skip = self._prep(x_t, t)
        out, cache = nd.forward(self.layers, inp)
        diff = out + skip - eps
        loss = float(np.mean(diff * diff))
        grads, _ = nd.backward(cache, 2.0 * diff / diff.size)
        return loss, [g for pair in grads for g in pair]

    def copy(self) -> "DenoiserModel":
        return DenoiserModel([l.copy() for l in self.trunk], self.head.copy(), self.T,
                             self.image_shape, self.n_time_features, self.data_std,
                             self.alpha_bar, self.laplace)


def train_denoiser(images: np.ndarray, sched: NoiseSchedule, epochs: int = 200,
                   seed: int = 0, hidden: Sequence[int] = (256, 256),
                   batch_size: int = 64, lr: float = 1e-3,
                   model: DenoiserModel | None = None):
    """Fit an epsilon-prediction denoiser by Adam on the simplified DDPM loss.

    Each epoch visits every image once with a fresh uniform step and fresh
    Gaussian noise. Returns ``(model, losses)`` with the mean loss per epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or len(images) == 0:
        raise ShapeError("need a nonempty (n, pixels) image array")
    init_rng = nd.make_rng(seed, "init")
    rng = nd.make_rng(seed, "noise")
    if model is None:
        side = int(round(np.sqrt(images.shape[1])))
        shape = (side, side) if side * side == images.shape[1] else (1, images.shape[1])
        model = DenoiserModel.init(sched.T, init_rng, hidden, image_shape=shape,
                                   data_std=float(images.std()), alpha_bar=sched.alpha_bar)
    params = model.params()
    opt = nd.OptimState(lr=lr)
    losses = []
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x0 = images[idx]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            loss, grads = model.loss_and_grads(x0, t, eps, sched)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"loss became {loss} in epoch {epoch}")
            nd.adam_step(params, grads, opt)
            total += loss * len(idx)
        losses.append(total / n)
        if epoch % 50 == 0:
            log.debug("denoiser epoch %d loss %.5f", epoch, losses[-1])
    return model, np.array(losses)


@dataclass
class DDIMConfig:
    sigma: float = 0.0
    target: str = "prev_step"

    def __post_init__(self):
        if self.target not in ("prev_step", "x0_estimate"):
            raise ParameterError(f"unknown DDIM target {self.target!r}")


def ddim_from_eps(x_t, eps_pred, t: int, t_prev: int, sched: NoiseSchedule,
                  cfg: DDIMConfig = DDIMConfig(), noise=None) -> np.ndarray:
    """DDIM update given a noise prediction; broadcasts over leading axes."""
    if t_prev >= t:
        raise ParameterError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    if not (1 <= t <= sched.T and t_prev >= 0):
        raise ParameterError(f"steps ({t}, {t_prev}) out of range")
    a_t = sched.alpha_bar[t]
    x0_hat = (x_t - np.sqrt(1.0 - a_t) * eps_pred) / np.sqrt(a_t)
    if cfg.target == "x0_estimate":
        return x0_hat
    a_prev = sched.alpha_bar[t_prev]
    sigma = cfg.sigma
    dir_coef = 1.0 - a_prev - sigma * sigma
    if dir_coef < 0:
        raise ParameterError(f"sigma={sigma} too large for step {t_prev}")
    out = np.sqrt(a_prev) * x0_hat + np.sqrt(dir_coef) * eps_pred
    if sigma != 0.0:
        if noise is None:
            raise ParameterError("stochastic DDIM (sigma > 0) needs a noise array")
        out = out + sigma * noise
    return out


def ddim_step(model: DenoiserModel, x_t, t: int, t_prev: int,
              cfg: DDIMConfig = DDIMConfig(), sched: NoiseSchedule | None = None,
              noise=None) -> np.ndarray:
    """One DDIM reverse step from ``t`` to ``t_prev`` (or to the x0 estimate)."""
    if sched is None:
        raise ParameterError("a noise schedule is required")
    if t_prev >= t:
        raise ParameterError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    eps_pred = model.predict_eps(x_t, t)
    return ddim_from_eps(np.atleast_2d(x_t), eps_pred, t, t_prev, sched, cfg, noise)


def generate(model: DenoiserModel, sched: NoiseSchedule, cfg: DDIMConfig = DDIMConfig(),
             n: int = 1, seed: int = 0) -> np.ndarray:
    """Sample ``n`` images by DDIM from standard normal ``x_T``.

    Walks the schedule's ``ddim_subset`` from the top down to step 0.
    """
    steps = np.asarray(sched.ddim_subset)
    if steps.size == 0:
        raise ParameterError("empty DDIM subset")
    rng = nd.make_rng(seed, "noise")
    x = rng.standard_normal((n, model.n_pixels))
    if n == 0:
        return x
    step_cfg = DDIMConfig(cfg.sigma, "prev_step")
    chain = [*steps[::-1].tolist(), 0]
    for t, t_prev in zip(chain[:-1], chain[1:]):
        noise = rng.standard_normal(x.shape) if cfg.sigma else None
        x = ddim_step(model, x, int(t), int(t_prev), step_cfg, sched, noise)
    return x


# -- checkpoints -------------------------------------------------------------

def _layer_to_json(layer: nd.DenseLayer) -> dict:
    return {"activation": layer.activation, "shape": list(layer.weight.shape),
            "weight": layer.weight.ravel().tolist(), "bias": layer.bias.tolist()}


def _layer_from_json(d: dict) -> nd.DenseLayer:
    w = np.array(d["weight"], dtype=np.float64).reshape(d["shape"])
    return nd.DenseLayer(w, np.array(d["bias"], dtype=np.float64), d["activation"])


def model_to_dict(model: DenoiserModel, sched: NoiseSchedule) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "denoiser",
        "schedule": {"T": sched.T, "beta_start": sched.beta_start,
                     "beta_end": sched.beta_end,
                     "ddim_subset": [int(s) for s in sched.ddim_subset]},
        "image_shape": list(model.image_shape),
        "n_time_features": model.n_time_features,
        "data_std": model.data_std,
        "layers": [_layer_to_json(l) for l in model.trunk],
        "head": _layer_to_json(model.head),
    }
    if model.laplace is not None:
        doc["laplace"] = model.laplace.to_dict()
    return doc


def model_from_dict(doc: dict):
    if doc.get("format_version") != FORMAT_VERSION or doc.get("kind") != "denoiser":
        raise CheckpointError("not a denoiser checkpoint of a supported version")
    s = doc["schedule"]
    sched = make_schedule(s["T"], s["beta_start"], s["beta_end"])
    sched.ddim_subset = np.array(s["ddim_subset"], dtype=int)
    model = DenoiserModel([_layer_from_json(d) for d in doc["layers"]],
                          _layer_from_json(doc["head"]), s["T"],
                          tuple(doc["image_shape"]), doc["n_time_features"],
                          doc.get("data_std"),
                          sched.alpha_bar if doc.get("data_std") is not None else None)
    if "laplace" in doc:
        from .laplace import LaplacePosterior
        model.laplace = LaplacePosterior.from_dict(doc["laplace"])
    return model, sched


def save_model(path, model: DenoiserModel, sched: NoiseSchedule) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, sched)))


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return model_from_dict(doc)
