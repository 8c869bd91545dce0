"""Monte-Carlo epistemic/aleatoric uncertainty and reconstruction error maps.

For an image ``x`` and step ``t`` the one-step map ``mu_theta`` noises ``x``
with ``eps_j`` and applies one DDIM step with head weights ``theta``:

* epistemic  U = Var_i  mean_j mu_{theta_i}(x_t^j)   (posterior draws i)
* aleatoric  A = Var_j  mu_{theta_MAP}(x_t^j)
* recon      R = mean_j (mu_{theta_MAP}(x_t^j) - ref_j)^2

Variances are unbiased. The same ``eps_j`` are reused by all three
estimators and across all ``theta_i`` for one image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import DDIMConfig, DenoiserModel, NoiseSchedule, ddim_from_eps, forward_sample
from .errors import DataError, ParameterError, ShapeError
from .laplace import HeadSamples, LaplacePosterior, sample_weights
from .ndkernel import make_rng


@dataclass(frozen=True)
class UncertaintyConfig:
    t: int = 200
    M: int = 20
    N: int = 20
    target: str = "prev_step"

    def validate(self, sched: NoiseSchedule | None = None, need_m=False, min_n=1):
        if self.target not in ("prev_step", "x0_estimate"):
            raise ParameterError(f"unknown target {self.target!r}")
        if sched is not None and not 1 <= self.t <= sched.T:
            raise ParameterError(f"t={self.t} outside 1..{sched.T}")
        if need_m and self.M < 2:
            raise ParameterError(f"epistemic variance needs M >= 2, got {self.M}")
        if self.N < min_n:
            raise ParameterError(f"need N >= {min_n}, got {self.N}")


@dataclass
class UncertaintyMap:
    epistemic: np.ndarray
    aleatoric: np.ndarray
    recon_error: np.ndarray
    image_id: int = 0
    label: int = -1

    @property
    def mean_epistemic(self) -> float:
        return float(self.epistemic.mean())

    @property
    def mean_aleatoric(self) -> float:
        return float(self.aleatoric.mean())

    @property
    def mean_recon(self) -> float:
        return float(self.recon_error.mean())


def draw_noise(seed: int, n: int, n_pixels: int) -> np.ndarray:
    """The shared ``eps_j`` draws used for one image."""
    return make_rng(seed, "noise").standard_normal((n, n_pixels))


def image_seed(seed: int, image_id: int) -> int:
    return int(make_rng(seed, "image", image_id).integers(2**32))


def _one_step(x_t, eps_pred, cfg: UncertaintyConfig, sched):
    return ddim_from_eps(x_t, eps_pred, cfg.t, cfg.t - 1, sched, DDIMConfig(0.0, cfg.target))


def _flat(x, model):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != model.n_pixels:
        raise ShapeError(f"image has {x.size} pixels, model expects {model.n_pixels}")
    return x


def epistemic_from_samples(x, model: DenoiserModel, heads: HeadSamples, eps: np.ndarray,
                           cfg: UncertaintyConfig, sched: NoiseSchedule) -> np.ndarray:
    """Per-pixel epistemic variance for given head draws and noise draws."""
    if len(heads) < 2:
        raise ParameterError("epistemic variance needs at least two head samples")
    x = _flat(x, model)
    x_t = forward_sample(np.broadcast_to(x, eps.shape), cfg.t, eps, sched)
    h = model.hidden(x_t, cfg.t)                                   # (N, K)
    eps_pred = (np.einsum("mpk,nk->mnp", heads.weight, h) + heads.bias[:, None, :]
                + model.skip(x_t, cfg.t)[None])
    mu = _one_step(x_t[None], eps_pred, cfg, sched)                # (M, N, P)
    return mu.mean(axis=1).var(axis=0, ddof=1).reshape(model.image_shape)


def _map_outputs(x, model, eps, cfg, sched):
    x = _flat(x, model)
    x_t = forward_sample(np.broadcast_to(x, eps.shape), cfg.t, eps, sched)
    return x, _one_step(x_t, model.predict_eps(x_t, cfg.t), cfg, sched)


def estimate_epistemic(x, model: DenoiserModel, post: LaplacePosterior,
                       cfg: UncertaintyConfig, sched: NoiseSchedule, seed: int = 0):
    """Epistemic map U of one image (``M`` posterior draws, ``N`` noise draws)."""
    cfg.validate(sched, need_m=True)
    eps = draw_noise(seed, cfg.N, model.n_pixels)
    heads = sample_weights(post, cfg.M, seed)
    return epistemic_from_samples(x, model, heads, eps, cfg, sched)


def estimate_aleatoric(x, model: DenoiserModel, cfg: UncertaintyConfig,
                       sched: NoiseSchedule, seed: int = 0) -> np.ndarray:
    """Aleatoric map A: spread of the MAP one-step output over noise draws."""
    cfg.validate(sched, min_n=2)
    eps = draw_noise(seed, cfg.N, model.n_pixels)
    _, mu = _map_outputs(x, model, eps, cfg, sched)
    return mu.var(axis=0, ddof=1).reshape(model.image_shape)


def _recon(x, mu, eps, cfg, sched):
    if cfg.target == "x0_estimate":
        ref = x[None, :]
    else:
        ref = forward_sample(np.broadcast_to(x, eps.shape), cfg.t - 1, eps, sched)
    return ((mu - ref) ** 2).mean(axis=0)


def reconstruction_error(x, model: DenoiserModel, cfg: UncertaintyConfig,
                         sched: NoiseSchedule, seed: int = 0):
    """Mean squared one-step reconstruction error; returns ``(map, mean)``.

    The reference is ``x`` itself for the x0 target and the forward sample
    at ``t - 1`` (same noise draw) for the previous-step target.
    """
    cfg.validate(sched, min_n=1)
    eps = draw_noise(seed, cfg.N, model.n_pixels)
    xf, mu = _map_outputs(x, model, eps, cfg, sched)
    r = _recon(xf, mu, eps, cfg, sched).reshape(model.image_shape)
    return r, float(r.mean())


def estimate_image(x, model: DenoiserModel, post: LaplacePosterior,
                   cfg: UncertaintyConfig, sched: NoiseSchedule, seed: int = 0,
                   image_id: int = 0, label: int = -1) -> UncertaintyMap:
    """All three maps for one image from one shared set of noise draws."""
    cfg.validate(sched, need_m=True, min_n=2)
    eps = draw_noise(seed, cfg.N, model.n_pixels)
    heads = sample_weights(post, cfg.M, seed)
    u = epistemic_from_samples(x, model, heads, eps, cfg, sched)
    xf, mu = _map_outputs(x, model, eps, cfg, sched)
    a = mu.var(axis=0, ddof=1).reshape(model.image_shape)
    r = _recon(xf, mu, eps, cfg, sched).reshape(model.image_shape)
    return UncertaintyMap(u, a, r, image_id, label)


def estimate_all(dataset: np.ndarray, model: DenoiserModel, post: LaplacePosterior,
                 cfg: UncertaintyConfig, sched: NoiseSchedule, seed: int = 0,
                 labels: Sequence[int] | None = None,
                 image_ids: Sequence[int] | None = None) -> list[UncertaintyMap]:
    """Maps for every image; image ``k`` uses a seed derived from ``(seed, id_k)``.

    ``image_ids`` default to the row index.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if len(dataset) == 0:
        return []
    ids = range(len(dataset)) if image_ids is None else image_ids
    labels = [-1] * len(dataset) if labels is None else labels
    if not (len(ids) == len(labels) == len(dataset)):
        raise DataError("ids, labels and images must have equal length")
    return [estimate_image(x, model, post, cfg, sched, image_seed(seed, int(i)),
                           int(i), int(y))
            for x, i, y in zip(dataset, ids, labels)]


# -- persistence -------------------------------------------------------------

def write_maps_csv(path, maps: Sequence[UncertaintyMap]) -> None:
    if not maps:
        raise DataError("no maps to write")
    H, W = maps[0].epistemic.shape
    n = H * W
    header = (["image_id", "label", "H", "W"]
              + [f"U{i}" for i in range(n)] + [f"A{i}" for i in range(n)]
              + [f"R{i}" for i in range(n)] + ["mean_U", "mean_A", "mean_R"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for m in maps:
            w.writerow([m.image_id, m.label, H, W,
                        *map(repr, m.epistemic.ravel().tolist()),
                        *map(repr, m.aleatoric.ravel().tolist()),
                        *map(repr, m.recon_error.ravel().tolist()),
                        repr(m.mean_epistemic), repr(m.mean_aleatoric), repr(m.mean_recon)])


def read_maps_csv(path) -> list[UncertaintyMap]:
    maps = []
    with open(Path(path), newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            H, W = int(row[2]), int(row[3])
            n = H * W
            vals = np.array(row[4:4 + 3 * n], dtype=np.float64)
            maps.append(UncertaintyMap(vals[:n].reshape(H, W), vals[n:2 * n].reshape(H, W),
                                       vals[2 * n:].reshape(H, W), int(row[0]), int(row[1])))
    return maps
