"""Diagonal last-layer Laplace approximation for the denoiser head.

With a Gaussian likelihood on the noise targets and a linear head
``eps = W h + b``, the generalized Gauss-Newton matrix equals the exact
Hessian. Its diagonal is

    prec[W_ok] = tau + sum_n h_nk^2 / sigma2
    prec[b_o]  = tau + n / sigma2

(the same for every output ``o``), which is all this module stores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import DenoiserModel, NoiseSchedule, forward_sample
from .errors import ParameterError, ShapeError, StateError
from .ndkernel import make_rng


@dataclass
class LaplacePosterior:
    weight_map: np.ndarray
    bias_map: np.ndarray
    weight_precision: np.ndarray
    bias_precision: np.ndarray
    prior_precision: float = 1.0
    obs_noise_var: float = 1.0
    n_pairs: int = 0

    def __post_init__(self):
        if self.weight_precision.shape != self.weight_map.shape:
            raise ShapeError("weight precision shape differs from the MAP weights")
        if self.bias_precision.shape != self.bias_map.shape:
            raise ShapeError("bias precision shape differs from the MAP bias")
        if self.prior_precision <= 0:
            raise ParameterError("prior precision must be positive")

    @property
    def weight_var(self) -> np.ndarray:
        return 1.0 / self.weight_precision

    @property
    def bias_var(self) -> np.ndarray:
        return 1.0 / self.bias_precision

    def scaled(self, c: float) -> "LaplacePosterior":
        """Same mean, covariance multiplied by ``c``."""
        return LaplacePosterior(self.weight_map, self.bias_map,
                                self.weight_precision / c, self.bias_precision / c,
                                self.prior_precision, self.obs_noise_var, self.n_pairs)

    def to_dict(self) -> dict:
        return {
            "prior_precision": self.prior_precision,
            "obs_noise_var": self.obs_noise_var,
            "n_pairs": self.n_pairs,
            "shape": list(self.weight_map.shape),
            "weight_map": self.weight_map.ravel().tolist(),
            "bias_map": self.bias_map.tolist(),
            "weight_precision": self.weight_precision.ravel().tolist(),
            "bias_precision": self.bias_precision.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LaplacePosterior":
        shape = tuple(d["shape"])
        return cls(np.array(d["weight_map"]).reshape(shape), np.array(d["bias_map"]),
                   np.array(d["weight_precision"]).reshape(shape),
                   np.array(d["bias_precision"]), d["prior_precision"],
                   d["obs_noise_var"], d.get("n_pairs", 0))


def precision_from_features(features: np.ndarray, n_out: int, prior_precision: float,
                            obs_noise_var: float):
    """Diagonal GGN precision of a linear head given its input features.

    ``features`` has one row per (x, t, eps) pair. Returns the weight
    precision ``(n_out, K)`` and bias precision ``(n_out,)``.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError("features must be a (pairs, width) array")
    if prior_precision <= 0 or obs_noise_var <= 0:
        raise ParameterError("prior precision and noise variance must be positive")
    sq = np.einsum("nk,nk->k", features, features)
    return _assemble(sq, len(features), n_out, prior_precision, obs_noise_var)


def _assemble(sq, n_pairs, n_out, prior_precision, obs_noise_var):
    w_prec = prior_precision + np.broadcast_to(sq / obs_noise_var, (n_out, len(sq)))
    b_prec = np.full(n_out, prior_precision + n_pairs / obs_noise_var)
    return np.array(w_prec), b_prec


def fit_lllla(model: DenoiserModel, dataset: np.ndarray, sched: NoiseSchedule,
              prior_precision: float = 1.0, obs_noise_var: float = 1.0,
              n_mc_pairs: int = 4096, seed: int = 0, pairs=None,
              chunk: int = 512) -> LaplacePosterior:
    """Fit the diagonal last-layer posterior around the trained head.

    Curvature is accumulated over ``n_mc_pairs`` draws of (image, uniform
    step, Gaussian noise). Passing ``pairs=(x0, t, eps)`` accumulates over
    exactly those triples instead.
    """
    if prior_precision <= 0 or obs_noise_var <= 0:
        raise ParameterError("prior precision and noise variance must be positive")
    if not hasattr(model, "head") or model.head.activation != "identity":
        raise StateError("model has no linear head to place a posterior on")
    dataset = np.asarray(dataset, dtype=np.float64)
    if pairs is None:
        if n_mc_pairs > 0 and len(dataset) == 0:
            raise StateError("cannot accumulate curvature over an empty dataset")
        rng = make_rng(seed, "pairs")
        idx = rng.integers(0, max(len(dataset), 1), size=n_mc_pairs)
        ts = rng.integers(1, sched.T + 1, size=n_mc_pairs)
        eps = rng.standard_normal((n_mc_pairs, model.n_pixels))
        x0 = dataset[idx] if n_mc_pairs else np.zeros((0, model.n_pixels))
    else:
        x0, ts, eps = (np.asarray(a) for a in pairs)
        if not (len(x0) == len(ts) == len(eps)):
            raise ShapeError("pairs arrays must have equal length")
    width = model.head.n_in
    sq = np.zeros(width)
    for s in range(0, len(x0), chunk):
        x_t = forward_sample(x0[s:s + chunk], ts[s:s + chunk], eps[s:s + chunk], sched)
        h = model.hidden(x_t, ts[s:s + chunk])
        sq += np.einsum("nk,nk->k", h, h)
    w_prec, b_prec = _assemble(sq, len(x0), model.head.n_out, prior_precision,
                               obs_noise_var)
    return LaplacePosterior(model.head.weight.copy(), model.head.bias.copy(),
                            w_prec, b_prec, float(prior_precision),
                            float(obs_noise_var), int(len(x0)))


@dataclass
class HeadSamples:
    """``M`` head realizations: weights ``(M, out, in)``, biases ``(M, out)``."""

    weight: np.ndarray
    bias: np.ndarray

    def __len__(self) -> int:
        return len(self.weight)


def sample_weights(post: LaplacePosterior, M: int, seed: int = 0) -> HeadSamples:
    """Draw ``theta_i = theta_MAP + Sigma^{1/2} z_i`` for ``i = 1..M``."""
    if M < 1:
        raise ParameterError(f"need at least one sample, got M={M}")
    rng = make_rng(seed, "posterior")
    zw = rng.standard_normal((M, *post.weight_map.shape))
    zb = rng.standard_normal((M, *post.bias_map.shape))
    w = post.weight_map + zw / np.sqrt(post.weight_precision)
    b = post.bias_map + zb / np.sqrt(post.bias_precision)
    return HeadSamples(w, b)
