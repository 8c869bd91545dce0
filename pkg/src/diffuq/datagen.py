"""Procedural real textures, diffusion fakes and labelled train/val/test splits."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .diffusion import DDIMConfig, DenoiserModel, NoiseSchedule, generate, load_model
from .errors import CheckpointError, DataError, ParameterError
from .ndkernel import make_rng

SIDE = 16
PIXEL_NOISE = 0.05


def gen_real(n: int, seed: int = 0, side: int = SIDE) -> np.ndarray:
    """Grayscale textures in [-1, 1], shape ``(n, side*side)``.

    Each image mixes one to three low-frequency sinusoid gratings with up
    to three Gaussian blobs, then adds i.i.d. pixel noise of std 0.05.
    """
    if n < 0:
        raise ParameterError("n must be non-negative")
    rng = make_rng(seed, "real")
    yy, xx = np.mgrid[0:side, 0:side] / side
    out = np.empty((n, side * side))
    for k in range(n):
        img = np.zeros((side, side))
        for _ in range(rng.integers(1, 4)):
            freq = rng.uniform(0.5, 2.5)
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.15, 0.5)
            proj = np.cos(theta) * xx + np.sin(theta) * yy
            img += amp * np.sin(2 * np.pi * freq * proj + phase)
        for _ in range(rng.integers(0, 4)):
            cy, cx = rng.uniform(0, 1, size=2)
            width = rng.uniform(0.08, 0.25)
            amp = rng.uniform(-0.7, 0.7)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        img += PIXEL_NOISE * rng.standard_normal(img.shape)
        out[k] = np.clip(img, -1.0, 1.0).ravel()
    return out


@dataclass
class GeneratorSpec:
    """Where a group of images came from.

    ``kind`` is ``"real_textures"`` or ``"diffusion"``; diffusion specs name
    a checkpoint and the number of DDIM steps used to sample.
    """

    tag: str
    kind: str = "real_textures"
    seed: int = 0
    count: int = 0
    checkpoint: str | None = None
    ddim_steps: int | None = None

    def __post_init__(self):
        if self.kind not in ("real_textures", "diffusion"):
            raise ParameterError(f"unknown generator kind {self.kind!r}")


def gen_fake(spec: GeneratorSpec, model: DenoiserModel | None = None,
             sched: NoiseSchedule | None = None):
    """Sample ``spec.count`` images from a denoiser; returns ``(images, tags)``.

    When ``model`` is omitted it is loaded from ``spec.checkpoint``.
    Outputs are clamped to [-1, 1] like the real textures.
    """
    if spec.count == 0:
        return np.zeros((0, SIDE * SIDE)), []
    if model is None:
        if spec.checkpoint is None or not Path(spec.checkpoint).exists():
            raise CheckpointError(f"missing checkpoint for generator {spec.tag!r}")
        model, sched = load_model(spec.checkpoint)
    if sched is None:
        raise ParameterError("a schedule is required with an in-memory model")
    if spec.ddim_steps is not None:
        sched = sched.with_subset(spec.ddim_steps)
    imgs = np.clip(generate(model, sched, DDIMConfig(), spec.count, spec.seed), -1, 1)
    return imgs, [spec.tag] * spec.count


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    tags: list[str]
    split: str = "train"
    provenance: list[GeneratorSpec] = field(default_factory=list)
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 2:
            self.images = self.images.reshape(len(self.labels), -1)
        if len(self.images) != len(self.labels) or len(self.tags) != len(self.labels):
            raise DataError("images, labels and tags must have equal length")
        self.labels = np.asarray(self.labels, dtype=int)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        known = {g.tag for g in self.provenance}
        if self.provenance and not set(self.tags) <= known:
            raise DataError("example tags missing from provenance")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 (real) or 1 (fake)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask) -> "LabeledDataset":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return LabeledDataset(self.images[idx], self.labels[idx],
                              [self.tags[i] for i in idx], self.split,
                              self.provenance, self.ids[idx])


def _content_hash(img: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(img).tobytes()).hexdigest()


def build_split(real: np.ndarray, fakes: Mapping[str, np.ndarray],
                ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0,
                provenance: Sequence[GeneratorSpec] = (), real_tag: str = "real"):
    """Stratified (by generator tag) train/val/test split.

    ``fakes`` maps generator tag to an image array. Returns three
    ``LabeledDataset`` objects. Image ids are assigned before shuffling, so
    they identify the same picture across splits and reruns.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ParameterError("ratios must be three non-negative numbers summing to 1")
    real = np.asarray(real, dtype=np.float64)
    groups = [(real_tag, 0, real)] + [(tag, 1, np.asarray(x)) for tag, x in fakes.items()]
    if len(real) == 0 or sum(len(x) for _, _, x in groups[1:]) == 0:
        raise DataError("both real and fake images are required")
    prov = list(provenance) or [GeneratorSpec(real_tag, "real_textures", count=len(real))] + [
        GeneratorSpec(tag, "diffusion", count=len(x)) for tag, _, x in groups[1:]]
    rng = make_rng(seed, "split")
    parts = {s: ([], [], [], []) for s in ("train", "val", "test")}
    next_id = 0
    for tag, label, imgs in groups:
        n = len(imgs)
        ids = np.arange(next_id, next_id + n)
        next_id += n
        order = rng.permutation(n)
        cuts = np.round(np.cumsum(ratios) * n).astype(int)
        bounds = [0, cuts[0], cuts[1], n]
        for name, lo, hi in zip(("train", "val", "test"), bounds[:-1], bounds[1:]):
            sel = order[lo:hi]
            p = parts[name]
            p[0].append(imgs[sel])
            p[1].extend([label] * len(sel))
            p[2].extend([tag] * len(sel))
            p[3].extend(ids[sel].tolist())
    out = []
    width = real.shape[1]
    for name, (imgs, labels, tags, ids) in parts.items():
        arr = np.concatenate(imgs) if imgs else np.zeros((0, width))
        out.append(LabeledDataset(arr.reshape(-1, width), np.array(labels, dtype=int), tags,
                                  name, prov, np.array(ids, dtype=int)))
    seen: dict[str, str] = {}
    for ds in out:
        for img in ds.images:
            h = _content_hash(img)
            if seen.setdefault(h, ds.split) != ds.split:
                raise DataError("an image landed in two splits")
    return tuple(out)


# -- persistence -------------------------------------------------------------

def write_dataset_csv(path, datasets: Sequence[LabeledDataset]) -> None:
    width = datasets[0].images.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label", "generator_tag", "split"]
                   + [f"p{i}" for i in range(width)])
        for ds in datasets:
            for img, y, tag, i in zip(ds.images, ds.labels, ds.tags, ds.ids):
                w.writerow([int(i), int(y), tag, ds.split, *map(repr, img.tolist())])


def read_dataset_csv(path, provenance: Sequence[GeneratorSpec] = ()) -> dict[str, LabeledDataset]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            rows.setdefault(row[3], []).append(row)
    out = {}
    for split, rs in rows.items():
        imgs = np.array([[float(v) for v in row[4:]] for row in rs])
        out[split] = LabeledDataset(imgs, np.array([int(row[1]) for row in rs]),
                                    [row[2] for row in rs], split, list(provenance),
                                    np.array([int(row[0]) for row in rs]))
    return out


def write_manifest(path, provenance: Sequence[GeneratorSpec], **extra) -> None:
    doc = {"generators": [asdict(g) for g in provenance], **extra}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_manifest(path) -> list[GeneratorSpec]:
    doc = json.loads(Path(path).read_text())
    return [GeneratorSpec(**g) for g in doc["generators"]]
