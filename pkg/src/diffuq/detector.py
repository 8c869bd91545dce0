"""Real-vs-fake classifier fusing visual tokens with epistemic-uncertainty tokens.

Per image:

* ``v``   - visual tokens from 2x2 pixel patches (+ 2-D position) via an MLP
* ``u``   - per-patch log-uncertainty tokens, ``ubar`` their plain mean
* ``z_u`` - attention pooling of projected ``u`` with a learned query
* ``z_v`` - multi-head attention: query from ``ubar``, keys from ``u``,
  values from ``v``
* ``f = [z_u, z_v]`` feeds a small MLP classifier (2 logits) and the
  asymmetric contrastive loss.

All gradients are written out by hand and checked against finite
differences in the test suite.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndkernel as nd
from .errors import CheckpointError, DataError, NumericError, ParameterError, ShapeError, StateError

log = logging.getLogger(__name__)

U_FLOOR = 1e-20


@dataclass
class AsymmetricLossConfig:
    m0: float = 0.6
    m1: float = 1.0
    lam: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.m0 <= self.m1 <= 1.0) or self.lam < 0:
            raise ParameterError(f"need 0 <= m0 <= m1 <= 1 and lambda >= 0, got {self}")


@dataclass
class DetectorConfig:
    token_dim: int = 32      # C2
    attn_dim: int = 32       # d
    n_heads: int = 4
    cls_hidden: int = 64
    patch: int = 2

    def __post_init__(self):
        if self.attn_dim % self.n_heads:
            raise ParameterError("attention width must be divisible by the head count")


@dataclass
class LabeledExample:
    image: np.ndarray
    umap: object            # UncertaintyMap
    label: int
    tag: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")


# -- small pieces ------------------------------------------------------------

def softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(p, dp, axis=-1):
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


def patchify(images: np.ndarray, side: int, patch: int = 2) -> np.ndarray:
    """``(B, side*side)`` -> ``(B, n_tokens, patch*patch)`` in row-major patch order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != side * side:
        raise ShapeError(f"expected (B, {side * side}) images, got {images.shape}")
    if side % patch:
        raise ShapeError("image side must be a multiple of the patch size")
    g = side // patch
    x = images.reshape(-1, g, patch, g, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(len(images), g * g, patch * patch)


def pool_map(maps: np.ndarray, patch: int = 2) -> np.ndarray:
    """Mean-pool ``(B, H, W)`` maps onto the token grid -> ``(B, n_tokens)``."""
    maps = np.asarray(maps, dtype=np.float64)
    B, H, W = maps.shape
    x = maps.reshape(B, H // patch, patch, W // patch, patch)
    return x.mean(axis=(2, 4)).reshape(B, -1)


def positions(side: int, patch: int = 2) -> np.ndarray:
    g = side // patch
    r, c = np.mgrid[0:g, 0:g]
    scale = max(g - 1, 1)
    return np.stack([2 * r.ravel() / scale - 1, 2 * c.ravel() / scale - 1], axis=1)


# -- encoder -----------------------------------------------------------------

@dataclass
class EncoderModel:
    layers: list[nd.DenseLayer]
    side: int = 16
    patch: int = 2

    @classmethod
    def init(cls, rng, token_dim=32, side=16, patch=2):
        n_in = patch * patch + 2
        return cls(nd.mlp([n_in, token_dim, token_dim], rng, "silu", "silu"), side, patch)

    @property
    def n_tokens(self) -> int:
        return (self.side // self.patch) ** 2

    def params(self):
        return [p for l in self.layers for p in l.params()]

    def forward(self, images):
        p = patchify(images, self.side, self.patch)
        B, n, _ = p.shape
        pos = np.broadcast_to(positions(self.side, self.patch), (B, n, 2))
        x = np.concatenate([p, pos], axis=2).reshape(B * n, -1)
        v, cache = nd.forward(self.layers, x)
        return v.reshape(B, n, -1), cache

    def backward(self, cache, dv):
        grads, _ = nd.backward(cache, dv.reshape(-1, dv.shape[-1]))
        return [g for pair in grads for g in pair]


def encode(enc: EncoderModel, image) -> np.ndarray:
    """Visual token grid ``(n_tokens, C2)`` of one image (or ``(B, n, C2)``)."""
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 1 or (image.ndim == 2 and image.shape == (enc.side, enc.side))
    if image.size % (enc.side * enc.side):
        raise ShapeError(f"image of shape {image.shape} does not fit a {enc.side}x{enc.side} grid")
    v, _ = enc.forward(image.reshape(-1, enc.side * enc.side))
    return v[0] if single else v


# -- fusion head -------------------------------------------------------------

@dataclass
class FusionHead:
    u_proj: nd.DenseLayer       # C1 -> d
    pool_query: np.ndarray      # (d,)
    w_q: nd.DenseLayer
    w_k: nd.DenseLayer
    w_v: nd.DenseLayer          # C2 -> d
    w_o: nd.DenseLayer
    n_heads: int = 4

    @classmethod
    def init(cls, rng, token_dim=32, attn_dim=32, n_heads=4, u_dim=1):
        lin = lambda a, b: nd.DenseLayer.init(a, b, rng, "identity")
        q = rng.normal(0.0, 1.0 / np.sqrt(attn_dim), size=attn_dim)
        return cls(nd.DenseLayer.init(u_dim, attn_dim, rng, "silu"), q,
                   lin(attn_dim, attn_dim), lin(attn_dim, attn_dim),
                   lin(token_dim, attn_dim), lin(attn_dim, attn_dim), n_heads)

    @property
    def d(self) -> int:
        return self.w_o.n_out

    def params(self):
        return [*self.u_proj.params(), self.pool_query, *self.w_q.params(),
                *self.w_k.params(), *self.w_v.params(), *self.w_o.params()]


def _project(layer, x):
    shape = x.shape
    y, cache = nd.forward([layer], x.reshape(-1, shape[-1]))
    return y.reshape(*shape[:-1], -1), cache


def _project_back(cache, dy):
    grads, dx = nd.backward(cache, dy.reshape(-1, dy.shape[-1]))
    return grads[0], dx


def attention_pool(pu: np.ndarray, query: np.ndarray):
    """``z = sum_i softmax_i(q . pu_i) pu_i`` over tokens; ``pu`` is ``(..., n, d)``."""
    alpha = softmax(pu @ query, axis=-1)
    return np.einsum("...n,...nd->...d", alpha, pu), alpha


def _attention_pool_backward(pu, query, alpha, dz):
    dalpha = np.einsum("...nd,...d->...n", pu, dz)
    da = _softmax_backward(alpha, dalpha)
    dpu = alpha[..., None] * dz[..., None, :] + da[..., None] * query
    dq = (da[..., None] * pu).reshape(-1, pu.shape[-1]).sum(axis=0)
    return dpu, dq


def mha(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int):
    """Single-query multi-head attention on already projected inputs.

    ``q`` is ``(B, d)``, ``k`` and ``v`` are ``(B, n, d)``. Returns the
    concatenated head outputs ``(B, d)`` and the weights ``(B, H, n)``.
    """
    B, n, d = k.shape
    dh = d // n_heads
    qh = q.reshape(B, n_heads, dh)
    kh = k.reshape(B, n, n_heads, dh)
    vh = v.reshape(B, n, n_heads, dh)
    beta = softmax(np.einsum("bhe,bnhe->bhn", qh, kh) / np.sqrt(dh), axis=-1)
    out = np.einsum("bhn,bnhe->bhe", beta, vh).reshape(B, d)
    return out, beta


def _mha_backward(q, k, v, beta, dout, n_heads):
    B, n, d = k.shape
    dh = d // n_heads
    qh = q.reshape(B, n_heads, dh)
    kh = k.reshape(B, n, n_heads, dh)
    vh = v.reshape(B, n, n_heads, dh)
    do = dout.reshape(B, n_heads, dh)
    dbeta = np.einsum("bhe,bnhe->bhn", do, vh)
    dvh = np.einsum("bhn,bhe->bnhe", beta, do)
    ds = _softmax_backward(beta, dbeta) / np.sqrt(dh)
    dqh = np.einsum("bhn,bnhe->bhe", ds, kh)
    dkh = np.einsum("bhn,bhe->bnhe", ds, qh)
    return dqh.reshape(B, d), dkh.reshape(B, n, d), dvh.reshape(B, n, d)


def mha_fuse(u_mean, u_tokens, v_tokens, head: FusionHead):
    """``z_v = MHA(ubar, u, v)`` for a batch.

    ``u_mean`` is ``(B, C1)``, ``u_tokens`` ``(B, n, C1)``, ``v_tokens``
    ``(B, n, C2)``. Query and keys go through the shared uncertainty
    projection before their own linear maps.
    """
    u_tokens = np.asarray(u_tokens, dtype=np.float64)
    v_tokens = np.asarray(v_tokens, dtype=np.float64)
    if u_tokens.shape[:2] != v_tokens.shape[:2]:
        raise ShapeError(f"u tokens {u_tokens.shape[:2]} vs v tokens {v_tokens.shape[:2]}")
    pbar, _ = _project(head.u_proj, np.asarray(u_mean, dtype=np.float64))
    pu, _ = _project(head.u_proj, u_tokens)
    q, _ = _project(head.w_q, pbar)
    k, _ = _project(head.w_k, pu)
    val, _ = _project(head.w_v, v_tokens)
    o, _ = mha(q, k, val, head.n_heads)
    z, _ = _project(head.w_o, o)
    return z


# -- losses ------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = len(labels)
    loss = -logp[np.arange(B), labels].mean()
    g = np.exp(logp)
    g[np.arange(B), labels] -= 1.0
    return float(loss), g / B


def _pair_terms(features, labels, cfg):
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise NumericError("cosine similarity undefined for a zero-norm feature")
    unit = features / norms[:, None]
    sim = unit @ unit.T
    i, j = np.triu_indices(len(labels), k=1)
    s = sim[i, j]
    same = labels[i] == labels[j]
    margin = np.where(labels[i] == 0, cfg.m0, cfg.m1)
    arg = np.where(same, margin - s, s)
    return norms, unit, i, j, s, same, arg


def asymmetric_contrastive_loss(features: np.ndarray, labels, cfg: AsymmetricLossConfig):
    """Pairwise hinge on cosine similarity with class-specific margins.

    Over all unordered pairs: same-class pairs of class ``c`` pay
    ``max(0, m_c - s)``, cross-class pairs pay ``max(0, s)``; the sum is
    divided by the number of pairs. Returns ``(loss, dloss/dfeatures)``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if len(labels) < 2:
        raise DataError("the contrastive loss needs at least two samples")
    norms, unit, i, j, s, same, arg = _pair_terms(features, labels, cfg)
    n_pairs = len(s)
    loss = np.maximum(arg, 0.0).sum() / n_pairs
    ds = np.where(arg > 0, np.where(same, -1.0, 1.0), 0.0) / n_pairs
    dsim = np.zeros((len(labels), len(labels)))
    dsim[i, j] = ds
    dsim = dsim + dsim.T
    # s_ij = u_i . u_j with u = f/|f|
    du = dsim @ unit
    dfeat = (du - unit * (du * unit).sum(axis=1, keepdims=True)) / norms[:, None]
    return float(loss), dfeat


def total_loss(logits, features, labels, cfg: AsymmetricLossConfig):
    """``cross-entropy + lambda * contrastive``; returns ``(loss, dlogits, dfeatures)``."""
    lc, dlogits = cross_entropy(logits, labels)
    if cfg.lam == 0.0:
        return lc, dlogits, np.zeros_like(np.asarray(features, dtype=np.float64))
    lm, dfeat = asymmetric_contrastive_loss(features, labels, cfg)
    return lc + cfg.lam * lm, dlogits, cfg.lam * dfeat


# -- full model --------------------------------------------------------------

@dataclass
class DetectorModel:
    encoder: EncoderModel
    head: FusionHead
    classifier: list[nd.DenseLayer]
    loss_cfg: AsymmetricLossConfig = field(default_factory=AsymmetricLossConfig)
    arch: DetectorConfig = field(default_factory=DetectorConfig)
    u_mean: float = 0.0
    u_std: float = 1.0
    trained: bool = False

    @classmethod
    def init(cls, seed: int = 0, arch: DetectorConfig | None = None,
             loss_cfg: AsymmetricLossConfig | None = None, side: int = 16):
        arch = arch or DetectorConfig()
        rng = nd.make_rng(seed, "init")
        enc = EncoderModel.init(rng, arch.token_dim, side, arch.patch)
        head = FusionHead.init(rng, arch.token_dim, arch.attn_dim, arch.n_heads)
        cls_layers = nd.mlp([2 * arch.attn_dim, arch.cls_hidden, 2], rng, "silu")
        return cls(enc, head, cls_layers, loss_cfg or AsymmetricLossConfig(), arch)

    def params(self):
        return [*self.encoder.params(), *self.head.params(),
                *[p for l in self.classifier for p in l.params()]]

    def u_tokens(self, umaps: np.ndarray) -> np.ndarray:
        """Normalized log-uncertainty tokens ``(B, n, 1)`` from ``(B, H, W)`` maps."""
        pooled = pool_map(umaps, self.encoder.patch)
        return ((np.log(pooled + U_FLOOR) - self.u_mean) / self.u_std)[..., None]

    def forward(self, images, u_tok):
        """Logits ``(B, 2)``, fused features ``(B, 2d)`` and a backward cache."""
        hd = self.head
        v, enc_cache = self.encoder.forward(images)
        ubar = u_tok.mean(axis=1)
        pbar, c_pbar = _project(hd.u_proj, ubar)
        pu, c_pu = _project(hd.u_proj, u_tok)
        z_u, alpha = attention_pool(pu, hd.pool_query)
        q, c_q = _project(hd.w_q, pbar)
        k, c_k = _project(hd.w_k, pu)
        val, c_v = _project(hd.w_v, v)
        o, beta = mha(q, k, val, hd.n_heads)
        z_v, c_o = _project(hd.w_o, o)
        feat = np.concatenate([z_u, z_v], axis=1)
        logits, c_cls = nd.forward(self.classifier, feat)
        cache = dict(enc=enc_cache, c_pbar=c_pbar, c_pu=c_pu, pu=pu, alpha=alpha,
                     c_q=c_q, c_k=c_k, c_v=c_v, c_o=c_o, q=q, k=k, val=val, beta=beta,
                     c_cls=c_cls)
        return logits, feat, cache

    def backward(self, cache, dlogits, dfeat_extra=None):
        hd = self.head
        d = hd.d
        cls_grads, dfeat = nd.backward(cache["c_cls"], dlogits)
        if dfeat_extra is not None:
            dfeat = dfeat + dfeat_extra
        dz_u, dz_v = dfeat[:, :d], dfeat[:, d:]
        g_o, do = _project_back(cache["c_o"], dz_v)
        dq, dk, dval = _mha_backward(cache["q"], cache["k"], cache["val"], cache["beta"],
                                     do.reshape(dz_v.shape), hd.n_heads)
        g_q, dpbar = _project_back(cache["c_q"], dq)
        g_k, dpu_k = _project_back(cache["c_k"], dk)
        g_v, dv = _project_back(cache["c_v"], dval)
        dpu_pool, dquery = _attention_pool_backward(cache["pu"], hd.pool_query,
                                                    cache["alpha"], dz_u)
        dpu = dpu_k.reshape(dpu_pool.shape) + dpu_pool
        g_pu, _ = _project_back(cache["c_pu"], dpu)
        g_pbar, _ = _project_back(cache["c_pbar"], dpbar)
        enc_grads = self.encoder.backward(cache["enc"], dv.reshape(cache["val"].shape[:2] + (-1,)))
        head_grads = [g_pu[0] + g_pbar[0], g_pu[1] + g_pbar[1], dquery,
                      *g_q, *g_k, *g_v, *g_o]
        return [*enc_grads, *head_grads, *[g for pair in cls_grads for g in pair]]

    def loss_and_grads(self, images, u_tok, labels, cfg: AsymmetricLossConfig | None = None):
        cfg = cfg or self.loss_cfg
        logits, feat, cache = self.forward(images, u_tok)
        loss, dlogits, dfeat = total_loss(logits, feat, labels, cfg)
        return loss, self.backward(cache, dlogits, dfeat)

    def predict_proba(self, images, umaps) -> np.ndarray:
        if not self.trained:
            raise StateError("detector has not been trained")
        logits, _, _ = self.forward(np.asarray(images, dtype=np.float64),
                                    self.u_tokens(np.asarray(umaps)))
        return softmax(logits, axis=1)


def _stack(examples: Sequence[LabeledExample]):
    images = np.stack([np.asarray(e.image, dtype=np.float64).ravel() for e in examples])
    umaps = np.stack([np.asarray(e.umap.epistemic, dtype=np.float64) for e in examples])
    labels = np.array([e.label for e in examples], dtype=int)
    return images, umaps, labels


def train_detector(examples: Sequence[LabeledExample],
                   cfg: AsymmetricLossConfig | None = None, epochs: int = 100,
                   batch: int = 48, lr: float = 1e-4, seed: int = 0,
                   arch: DetectorConfig | None = None):
    """Train encoder, fusion head and classifier jointly under CE + lambda * contrastive.

    Returns ``(model, losses)`` with the mean minibatch loss per epoch.
    Batches of fewer than two examples are skipped.
    """
    cfg = cfg or AsymmetricLossConfig()
    images, umaps, labels = _stack(examples)
    if len(set(labels.tolist())) < 2:
        raise DataError("training data must contain both real and fake examples")
    side = int(round(np.sqrt(images.shape[1])))
    model = DetectorModel.init(seed, arch, cfg, side)
    logu = np.log(pool_map(umaps, model.encoder.patch) + U_FLOOR)
    model.u_mean = float(logu.mean())
    model.u_std = float(logu.std()) or 1.0
    u_tok = model.u_tokens(umaps)
    params = model.params()
    opt = nd.OptimState(lr=lr)
    rng = nd.make_rng(seed, "batches")
    losses = []
    n = len(labels)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            if len(idx) < 2:
                continue
            loss, grads = model.loss_and_grads(images[idx], u_tok[idx], labels[idx], cfg)
            if not np.isfinite(loss):
                raise NumericError(f"detector loss became {loss} in epoch {epoch}")
            nd.adam_step(params, grads, opt)
            total += loss
            count += 1
        losses.append(total / max(count, 1))
    model.trained = True
    return model, np.array(losses)


def score(model: DetectorModel, image, umap) -> float:
    """Probability that one image is fake."""
    img = np.asarray(image, dtype=np.float64).reshape(1, -1)
    u = np.asarray(getattr(umap, "epistemic", umap), dtype=np.float64)[None]
    return float(model.predict_proba(img, u)[0, 1])


def score_batch(model: DetectorModel, images, umaps) -> np.ndarray:
    u = np.stack([np.asarray(getattr(m, "epistemic", m), dtype=np.float64) for m in umaps])
    return model.predict_proba(np.asarray(images, dtype=np.float64), u)[:, 1]


# -- checkpoints -------------------------------------------------------------

def _lj(layer):
    return {"activation": layer.activation, "shape": list(layer.weight.shape),
            "weight": layer.weight.ravel().tolist(), "bias": layer.bias.tolist()}


def _lf(d):
    return nd.DenseLayer(np.array(d["weight"]).reshape(d["shape"]), np.array(d["bias"]),
                         d["activation"])


def save_detector(path, model: DetectorModel) -> None:
    hd = model.head
    doc = {
        "format_version": 1, "kind": "detector",
        "loss": asdict(model.loss_cfg), "arch": asdict(model.arch),
        "u_mean": model.u_mean, "u_std": model.u_std, "trained": model.trained,
        "side": model.encoder.side,
        "encoder": [_lj(l) for l in model.encoder.layers],
        "head": {"u_proj": _lj(hd.u_proj), "pool_query": hd.pool_query.tolist(),
                 "w_q": _lj(hd.w_q), "w_k": _lj(hd.w_k), "w_v": _lj(hd.w_v),
                 "w_o": _lj(hd.w_o), "n_heads": hd.n_heads},
        "classifier": [_lj(l) for l in model.classifier],
    }
    Path(path).write_text(json.dumps(doc))


def load_detector(path) -> DetectorModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read detector checkpoint {path}: {exc}") from exc
    if doc.get("kind") != "detector" or doc.get("format_version") != 1:
        raise CheckpointError("not a detector checkpoint of a supported version")
    arch = DetectorConfig(**doc["arch"])
    h = doc["head"]
    head = FusionHead(_lf(h["u_proj"]), np.array(h["pool_query"]), _lf(h["w_q"]),
                      _lf(h["w_k"]), _lf(h["w_v"]), _lf(h["w_o"]), h["n_heads"])
    enc = EncoderModel([_lf(d) for d in doc["encoder"]], doc["side"], arch.patch)
    return DetectorModel(enc, head, [_lf(d) for d in doc["classifier"]],
                         AsymmetricLossConfig(**doc["loss"]), arch, doc["u_mean"],
                         doc["u_std"], doc["trained"])
