"""End-to-end pipeline, run manifests, histogram export and parameter sweeps.

Stages, in order:

1. train the generator denoisers (``A`` is also the reference model whose
   Laplace posterior measures uncertainty),
2. sample fakes and assemble the labelled dataset,
3. fit the last-layer Laplace posterior of ``A``,
4. estimate uncertainty maps for every image,
5. train the detector on the training split (reals + generator ``A``),
6. score the test split, which also holds the unseen generators.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datagen, detector, diffusion, laplace, uncertainty
from .errors import DataError, ParameterError
from .metrics import MetricsReport, auroc, evaluate_scores

log = logging.getLogger(__name__)

GENERATOR_TAGS = ("A", "B", "C")
QUANTITIES = {"recon": "recon_error", "aleatoric": "aleatoric", "epistemic": "epistemic"}


@dataclass
class PipelineConfig:
    """Every knob of the pipeline as a flat, JSON-friendly record."""

    seed: int = 0
    # data
    n_real_diffusion: int = 2000
    n_real: int = 1000
    n_fake: int = 1000
    n_fake_unseen: int = 500
    split_train: float = 0.6
    split_val: float = 0.2
    split_test: float = 0.2
    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    diffusion_hidden: list = field(default_factory=lambda: [256, 256])
    diffusion_epochs: int = 50
    diffusion_batch: int = 128
    diffusion_lr: float = 1e-3
    ddim_steps: list = field(default_factory=lambda: [10, 20, 50])
    # laplace
    prior_precision: float = 1.0
    obs_noise_var: float = 1.0
    n_mc_pairs: int = 4096
    # uncertainty
    t: int = 200
    M: int = 20
    N: int = 20
    target: str = "prev_step"
    # detector
    m0: float = 0.6
    m1: float = 1.0
    lam: float = 0.5
    batch: int = 48
    lr: float = 1e-4
    detector_epochs: int = 100
    token_dim: int = 32
    attn_dim: int = 32
    n_heads: int = 4
    cls_hidden: int = 64
    # histograms
    hist_bins: int = 30

    def __post_init__(self):
        if len(self.ddim_steps) != len(GENERATOR_TAGS):
            raise ParameterError(f"ddim_steps needs one entry per generator {GENERATOR_TAGS}")
        if min(self.n_real, self.n_fake, self.n_real_diffusion) < 1 or self.n_fake_unseen < 0:
            raise ParameterError("image counts must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParameterError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def schedule(self) -> diffusion.NoiseSchedule:
        return diffusion.make_schedule(self.T, self.beta_start, self.beta_end)

    def unc(self) -> uncertainty.UncertaintyConfig:
        return uncertainty.UncertaintyConfig(self.t, self.M, self.N, self.target)

    def loss(self) -> detector.AsymmetricLossConfig:
        return detector.AsymmetricLossConfig(self.m0, self.m1, self.lam)

    def arch(self) -> detector.DetectorConfig:
        return detector.DetectorConfig(self.token_dim, self.attn_dim, self.n_heads,
                                       self.cls_hidden)

    def generator_seed(self, tag: str) -> int:
        """Training seed of generator ``tag``; variants differ by seed and step count."""
        return self.seed + GENERATOR_TAGS.index(tag)


@dataclass
class RunManifest:
    config: dict
    seeds: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    created: float = field(default_factory=time.time)

    def stage(self, name: str, started: float, **info) -> None:
        self.stages.append({"stage": name, "started": started,
                            "seconds": round(time.time() - started, 3), **info})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# -- stages ------------------------------------------------------------------

def diffusion_reals(cfg: PipelineConfig) -> np.ndarray:
    """Textures the denoisers are trained on (and the Laplace fit reuses)."""
    return datagen.gen_real(cfg.n_real_diffusion, cfg.seed)


def train_generators(cfg: PipelineConfig, reals: np.ndarray | None = None,
                     tags: Sequence[str] = GENERATOR_TAGS):
    """Train one denoiser per generator tag; returns ``({tag: model}, {tag: losses})``."""
    reals = diffusion_reals(cfg) if reals is None else reals
    sched = cfg.schedule()
    models, curves = {}, {}
    for tag in tags:
        models[tag], curves[tag] = diffusion.train_denoiser(
            reals, sched, epochs=cfg.diffusion_epochs, seed=cfg.generator_seed(tag),
            hidden=tuple(cfg.diffusion_hidden), batch_size=cfg.diffusion_batch,
            lr=cfg.diffusion_lr)
    return models, curves


def generator_specs(cfg: PipelineConfig, checkpoints: dict | None = None):
    checkpoints = checkpoints or {}
    specs = [datagen.GeneratorSpec("real", "real_textures", cfg.seed + 1000, cfg.n_real)]
    for tag, steps in zip(GENERATOR_TAGS, cfg.ddim_steps):
        count = cfg.n_fake if tag == "A" else cfg.n_fake_unseen
        specs.append(datagen.GeneratorSpec(tag, "diffusion", cfg.seed + 2000 + GENERATOR_TAGS.index(tag),
                                           count, checkpoints.get(tag), int(steps)))
    return specs


def build_dataset(cfg: PipelineConfig, models: dict, checkpoints: dict | None = None):
    """Reals and generator-``A`` fakes split three ways; unseen generators join the test split.

    Returns ``(train, val, test)`` as ``LabeledDataset`` objects.
    """
    sched = cfg.schedule()
    specs = generator_specs(cfg, checkpoints)
    real = datagen.gen_real(specs[0].count, specs[0].seed)
    fakes = {}
    for spec in specs[1:]:
        if spec.count == 0 or spec.tag not in models:
            continue
        fakes[spec.tag], _ = datagen.gen_fake(spec, models[spec.tag], sched)
    ratios = (cfg.split_train, cfg.split_val, cfg.split_test)
    train, val, test = datagen.build_split(real, {"A": fakes["A"]}, ratios, cfg.seed, specs)
    unseen = [t for t in fakes if t != "A"]
    if unseen:
        start = int(max(train.ids.max(initial=-1), val.ids.max(initial=-1),
                        test.ids.max(initial=-1))) + 1
        imgs = np.concatenate([test.images] + [fakes[t] for t in unseen])
        labels = np.concatenate([test.labels, np.ones(sum(len(fakes[t]) for t in unseen), int)])
        tags = list(test.tags) + [t for t in unseen for _ in range(len(fakes[t]))]
        ids = np.concatenate([test.ids, np.arange(start, start + len(labels) - len(test))])
        test = datagen.LabeledDataset(imgs, labels, tags, "test", specs, ids)
    return train, val, test


def fit_posterior(cfg: PipelineConfig, model, reals: np.ndarray | None = None):
    reals = diffusion_reals(cfg) if reals is None else reals
    return laplace.fit_lllla(model, reals, cfg.schedule(), cfg.prior_precision,
                             cfg.obs_noise_var, cfg.n_mc_pairs, cfg.seed)


def estimate_maps(cfg: PipelineConfig, ds: datagen.LabeledDataset, model, post):
    return uncertainty.estimate_all(ds.images, model, post, cfg.unc(), cfg.schedule(),
                                    cfg.seed, ds.labels, ds.ids)


def _examples(ds: datagen.LabeledDataset, maps):
    by_id = {m.image_id: m for m in maps}
    try:
        return [detector.LabeledExample(img, by_id[int(i)], int(y), tag)
                for img, i, y, tag in zip(ds.images, ds.ids, ds.labels, ds.tags)]
    except KeyError as exc:
        raise DataError(f"no uncertainty map for image id {exc.args[0]}") from None


def train_detector_stage(cfg: PipelineConfig, train_ds, maps):
    return detector.train_detector(_examples(train_ds, maps), cfg.loss(), cfg.detector_epochs,
                                   cfg.batch, cfg.lr, cfg.seed, cfg.arch())


def evaluate_detector(model, test_ds, maps) -> tuple[MetricsReport, np.ndarray]:
    ex = _examples(test_ds, maps)
    scores = detector.score_batch(model, [e.image for e in ex], [e.umap for e in ex])
    return evaluate_scores(scores, test_ds.labels, test_ds.tags), scores


# -- whole pipeline ----------------------------------------------------------

@dataclass
class PipelineResult:
    cfg: PipelineConfig
    models: dict
    post: laplace.LaplacePosterior
    splits: tuple
    maps: list
    detector: detector.DetectorModel | None = None
    report: MetricsReport | None = None
    scores: np.ndarray | None = None
    manifest: RunManifest | None = None

    @property
    def reference(self):
        return self.models["A"]

    def maps_for(self, ds) -> list:
        by_id = {m.image_id: m for m in self.maps}
        return [by_id[int(i)] for i in ds.ids]


def run_pipeline(cfg: PipelineConfig, with_detector: bool = True,
                 tags: Sequence[str] = GENERATOR_TAGS) -> PipelineResult:
    """Run every stage in memory; ``tags`` limits which generators are trained."""
    man = RunManifest(cfg.to_dict(), seeds={"pipeline": cfg.seed,
                                            **{t: cfg.generator_seed(t) for t in tags}})
    t0 = time.time()
    reals = diffusion_reals(cfg)
    models, curves = train_generators(cfg, reals, tags)
    man.stage("train-diffusion", t0, final_loss={t: float(c[-1]) for t, c in curves.items()})
    t0 = time.time()
    splits = build_dataset(cfg, models)
    man.stage("gen-data", t0, sizes={s.split: len(s) for s in splits})
    t0 = time.time()
    post = fit_posterior(cfg, models["A"], reals)
    man.stage("fit-laplace", t0)
    t0 = time.time()
    maps = [m for ds in splits for m in estimate_maps(cfg, ds, models["A"], post)]
    man.stage("estimate", t0, n_maps=len(maps))
    res = PipelineResult(cfg, models, post, splits, maps, manifest=man)
    man.metrics["separability"] = separability(*res_maps_labels(res, ("real", "A")))
    if with_detector:
        t0 = time.time()
        res.detector, det_curve = train_detector_stage(cfg, splits[0], maps)
        man.stage("train-detector", t0, final_loss=float(det_curve[-1]))
        res.report, res.scores = evaluate_detector(res.detector, splits[2],
                                                   res.maps_for(splits[2]))
        man.metrics["test"] = res.report.to_dict()
    return res


def res_maps_labels(res: PipelineResult, tags: Sequence[str]):
    """Maps and labels of every image (all splits) whose generator tag is in ``tags``."""
    maps, labels = [], []
    for ds in res.splits:
        keep = [i for i, t in enumerate(ds.tags) if t in tags]
        sub = ds.subset(np.array(keep, dtype=int))
        maps += res.maps_for(sub)
        labels += sub.labels.tolist()
    return maps, np.array(labels, dtype=int)


# -- analysis ----------------------------------------------------------------

def _means(maps, attr) -> np.ndarray:
    return np.array([float(getattr(m, attr).mean()) for m in maps])


def standardized_gap(real: np.ndarray, fake: np.ndarray) -> float:
    """``(mean_real - mean_fake) / sqrt((var_real + var_fake) / 2)``."""
    pooled = np.sqrt((np.var(real, ddof=1) + np.var(fake, ddof=1)) / 2)
    return float((np.mean(real) - np.mean(fake)) / pooled) if pooled > 0 else 0.0


def separability(maps, labels) -> dict:
    """Per quantity: class means/stds, standardized gap and single-score AUROC.

    The single-score detector flags low values as fake (fakes sit on the
    generator's manifold), so its AUROC uses ``-mean`` as the fake score.
    """
    labels = np.asarray(labels, dtype=int)
    out = {}
    for name, attr in QUANTITIES.items():
        v = _means(maps, attr)
        r, f = v[labels == 0], v[labels == 1]
        out[name] = {"mean_real": float(r.mean()), "std_real": float(r.std(ddof=1)),
                     "mean_fake": float(f.mean()), "std_fake": float(f.std(ddof=1)),
                     "gap": standardized_gap(r, f), "auroc": auroc(-v, labels)}
    return out


def export_histograms(maps, labels, bins: int, path) -> dict:
    """Write ``hist_{recon,aleatoric,epistemic}.csv`` and ``hist_summary.csv`` into ``path``.

    Histograms are over per-image mean values with ``bins`` equal-width bins
    spanning the pooled ``[min, max]``. Returns the written file paths.
    """
    labels = np.asarray(labels, dtype=int)
    if len(maps) == 0:
        raise DataError("no maps to histogram")
    if len(maps) != len(labels):
        raise DataError("one label per map required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, attr in QUANTITIES.items():
        v = _means(maps, attr)
        edges = np.histogram_bin_edges(v, bins=bins, range=(v.min(), v.max()))
        c_real, _ = np.histogram(v[labels == 0], edges)
        c_fake, _ = np.histogram(v[labels == 1], edges)
        files[name] = out / f"hist_{name}.csv"
        with open(files[name], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "count_real", "count_fake"])
            for lo, hi, a, b in zip(edges[:-1], edges[1:], c_real, c_fake):
                w.writerow([repr(float(lo)), repr(float(hi)), int(a), int(b)])
    files["summary"] = out / "hist_summary.csv"
    both = labels.min() == 0 and labels.max() == 1
    with open(files["summary"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "n_real", "mean_real", "std_real", "n_fake", "mean_fake",
                    "std_fake", "gap", "auroc"])
        for name, attr in QUANTITIES.items():
            v = _means(maps, attr)
            r, f = v[labels == 0], v[labels == 1]
            row = [name, len(r), _fmt(r.mean() if len(r) else np.nan),
                   _fmt(r.std(ddof=1) if len(r) > 1 else np.nan), len(f),
                   _fmt(f.mean() if len(f) else np.nan),
                   _fmt(f.std(ddof=1) if len(f) > 1 else np.nan)]
            if both and len(r) > 1 and len(f) > 1:
                row += [_fmt(standardized_gap(r, f)), _fmt(auroc(-v, labels))]
            else:
                row += ["nan", "nan"]
            w.writerow(row)
    return files


def _fmt(x) -> str:
    return repr(float(x))


# -- sweeps ------------------------------------------------------------------

SWEEP_AXES = {"t": "t", "m0": "m0", "lambda": "lam"}


def sweep(axis: str, values: Sequence[float], base: PipelineConfig,
          result: PipelineResult | None = None, path=None) -> list[dict]:
    """One row of test metrics per value of ``axis`` (``t``, ``m0`` or ``lambda``).

    The diffusion models, dataset and posterior are shared across values
    (taken from ``result`` or built once). A ``t`` value re-estimates the
    train and test maps; every value retrains the detector with the same seeds.
    """
    if axis not in SWEEP_AXES:
        raise ParameterError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    if len(values) == 0:
        raise ParameterError("sweep needs at least one value")
    if result is None:
        result = run_pipeline(base, with_detector=False)
    rows = []
    for value in values:
        value = int(value) if axis == "t" else float(value)
        cfg = replace(base, **{SWEEP_AXES[axis]: value})
        maps = result.maps
        if axis == "t" and value != result.cfg.t:
            maps = [m for ds in (result.splits[0], result.splits[2])
                    for m in estimate_maps(cfg, ds, result.reference, result.post)]
        model, _ = train_detector_stage(cfg, result.splits[0], maps)
        by_id = {m.image_id: m for m in maps}
        test = result.splits[2]
        report, _ = evaluate_detector(model, test, [by_id[int(i)] for i in test.ids])
        row = {"axis": axis, "value": value, "acc_at_half": report.acc_at_half,
               "average_precision": report.average_precision, "auroc": report.auroc,
               "n_real": report.n_real, "n_fake": report.n_fake}
        for tag, m in report.per_generator.items():
            row[f"acc_{tag}"] = m["acc_at_half"]
            row[f"auroc_{tag}"] = m["auroc"]
        rows.append(row)
    if path is not None:
        write_rows_csv(path, rows)
    return rows


def write_rows_csv(path, rows: list[dict]) -> None:
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])


def interior_optimum(values: Sequence[float], accs: Sequence[float]) -> bool:
    """True when the best accuracy sits strictly inside the swept range."""
    best = int(np.argmax(accs))
    return 0 < best < len(values) - 1
