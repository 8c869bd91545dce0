"""Command line front end; one subcommand per pipeline stage.

Every command reads and writes files in ``--out`` and appends a stage
record to ``manifest.json`` there. Typical order::

    diffuq gen-data          # real textures for denoiser training
    diffuq train-diffusion   # generator checkpoints A, B, C
    diffuq gen-data          # now also samples fakes -> dataset.csv
    diffuq fit-laplace
    diffuq estimate
    diffuq train-detector
    diffuq evaluate
    diffuq export-hist
    diffuq sweep --axis t --values 100,200,300,400

``diffuq run`` does all of it in one go. Failures exit with status 2 and
print ``error: <category>: <message>`` on one line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datagen, detector, diffusion, harness, uncertainty
from .errors import CheckpointError, DataError, DiffuqError

log = logging.getLogger("diffuq")


class Workspace:
    """Paths and manifest bookkeeping for one output directory."""

    def __init__(self, out, cfg: harness.PipelineConfig):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        mpath = self.out / "manifest.json"
        if mpath.exists():
            self.manifest = harness.RunManifest.load(mpath)
            self.manifest.config = cfg.to_dict()
        else:
            self.manifest = harness.RunManifest(cfg.to_dict(), seeds={"pipeline": cfg.seed})

    def path(self, name: str) -> Path:
        return self.out / name

    def checkpoint(self, tag: str) -> Path:
        return self.path(f"denoiser_{tag}.json")

    def need(self, name: str, hint: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise CheckpointError(f"{p} not found; run `{hint}` first")
        return p

    def save(self) -> None:
        self.manifest.save(self.path("manifest.json"))

    # loaders
    def diffusion_reals(self) -> np.ndarray:
        p = self.need("diffusion_reals.csv", "gen-data")
        return datagen.read_dataset_csv(p)["train"].images

    def splits(self):
        p = self.need("dataset.csv", "gen-data")
        prov = datagen.read_manifest(self.need("dataset_manifest.json", "gen-data"))
        d = datagen.read_dataset_csv(p, prov)
        return tuple(d[s] for s in ("train", "val", "test"))

    def reference(self):
        model, sched = diffusion.load_model(self.need("denoiser_A.json", "train-diffusion"))
        return model, sched

    def maps(self):
        return uncertainty.read_maps_csv(self.need("maps.csv", "estimate"))


# -- commands ----------------------------------------------------------------

def cmd_gen_data(ws: Workspace, args) -> None:
    cfg = ws.cfg
    t0 = time.time()
    reals = harness.diffusion_reals(cfg)
    spec = datagen.GeneratorSpec("real", "real_textures", cfg.seed, len(reals))
    datagen.write_dataset_csv(ws.path("diffusion_reals.csv"), [
        datagen.LabeledDataset(reals, np.zeros(len(reals), int), ["real"] * len(reals),
                               "train", [spec])])
    written = ["diffusion_reals.csv"]
    ckpts = {t: ws.checkpoint(t) for t in harness.GENERATOR_TAGS}
    if all(p.exists() for p in ckpts.values()):
        models = {t: diffusion.load_model(p)[0] for t, p in ckpts.items()}
        splits = harness.build_dataset(cfg, models, {t: str(p) for t, p in ckpts.items()})
        datagen.write_dataset_csv(ws.path("dataset.csv"), splits)
        datagen.write_manifest(ws.path("dataset_manifest.json"), splits[0].provenance,
                               seed=cfg.seed, split_seed=cfg.seed,
                               ratios=[cfg.split_train, cfg.split_val, cfg.split_test])
        written += ["dataset.csv", "dataset_manifest.json"]
    else:
        log.info("generator checkpoints missing; wrote real textures only")
    ws.manifest.stage("gen-data", t0, files=written)
    print("wrote " + ", ".join(written))


def cmd_train_diffusion(ws: Workspace, args) -> None:
    cfg = ws.cfg
    t0 = time.time()
    reals = ws.diffusion_reals()
    models, curves = harness.train_generators(cfg, reals)
    sched = cfg.schedule()
    with open(ws.path("losses_diffusion.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *models])
        for e, row in enumerate(zip(*curves.values())):
            w.writerow([e, *map(repr, map(float, row))])
    for tag, model in models.items():
        diffusion.save_model(ws.checkpoint(tag), model, sched)
        ws.manifest.checkpoints[f"denoiser_{tag}"] = str(ws.checkpoint(tag))
        ws.manifest.seeds[f"generator_{tag}"] = cfg.generator_seed(tag)
    ws.manifest.stage("train-diffusion", t0,
                      final_loss={t: float(c[-1]) for t, c in curves.items()})
    print("trained generators " + ", ".join(models))


def cmd_fit_laplace(ws: Workspace, args) -> None:
    t0 = time.time()
    model, sched = ws.reference()
    post = harness.fit_posterior(ws.cfg, model, ws.diffusion_reals())
    model.laplace = post
    diffusion.save_model(ws.checkpoint("A"), model, sched)
    ws.manifest.stage("fit-laplace", t0, prior_precision=post.prior_precision,
                      obs_noise_var=post.obs_noise_var, n_pairs=post.n_pairs)
    print(f"fitted last-layer posterior over {post.n_pairs} pairs")


def _posterior(model):
    if model.laplace is None:
        raise CheckpointError("reference checkpoint has no posterior; run `fit-laplace` first")
    return model.laplace


def cmd_estimate(ws: Workspace, args) -> None:
    t0 = time.time()
    model, _ = ws.reference()
    post = _posterior(model)
    maps = [m for ds in ws.splits() for m in harness.estimate_maps(ws.cfg, ds, model, post)]
    maps.sort(key=lambda m: m.image_id)
    uncertainty.write_maps_csv(ws.path("maps.csv"), maps)
    ws.manifest.stage("estimate", t0, n_maps=len(maps), t=ws.cfg.t, M=ws.cfg.M, N=ws.cfg.N)
    print(f"wrote {len(maps)} uncertainty maps")


def cmd_train_detector(ws: Workspace, args) -> None:
    t0 = time.time()
    train, _, _ = ws.splits()
    model, losses = harness.train_detector_stage(ws.cfg, train, ws.maps())
    detector.save_detector(ws.path("detector.json"), model)
    with open(ws.path("losses_detector.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for e, v in enumerate(losses):
            w.writerow([e, repr(float(v))])
    ws.manifest.checkpoints["detector"] = str(ws.path("detector.json"))
    ws.manifest.stage("train-detector", t0, final_loss=float(losses[-1]))
    print(f"trained detector, final loss {losses[-1]:.4f}")


def cmd_evaluate(ws: Workspace, args) -> None:
    t0 = time.time()
    model = detector.load_detector(ws.need("detector.json", "train-detector"))
    _, _, test = ws.splits()
    by_id = {m.image_id: m for m in ws.maps()}
    report, scores = harness.evaluate_detector(model, test, [by_id[int(i)] for i in test.ids])
    with open(ws.path("scores.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label", "generator_tag", "score"])
        for i, y, tag, s in zip(test.ids, test.labels, test.tags, scores):
            w.writerow([int(i), int(y), tag, repr(float(s))])
    ws.path("metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    ws.manifest.metrics["test"] = report.to_dict()
    ws.manifest.stage("evaluate", t0)
    print(f"ACC@0.5 {report.acc_at_half:.4f}  AP {report.average_precision:.4f}  "
          f"AUROC {report.auroc:.4f}")


def cmd_export_hist(ws: Workspace, args) -> None:
    t0 = time.time()
    tags = set(args.tags.split(","))
    by_id = {m.image_id: m for m in ws.maps()}
    maps, labels = [], []
    for ds in ws.splits():
        for i, y, tag in zip(ds.ids, ds.labels, ds.tags):
            if tag in tags:
                maps.append(by_id[int(i)])
                labels.append(int(y))
    if not maps:
        raise DataError(f"no images with tags {sorted(tags)}")
    files = harness.export_histograms(maps, labels, args.bins or ws.cfg.hist_bins, ws.out)
    ws.manifest.metrics["separability"] = harness.separability(maps, labels)
    ws.manifest.stage("export-hist", t0, tags=sorted(tags), files=[p.name for p in files.values()])
    print("wrote " + ", ".join(p.name for p in files.values()))


def cmd_sweep(ws: Workspace, args) -> None:
    t0 = time.time()
    values = [float(v) for v in args.values.split(",") if v.strip()]
    model, sched = ws.reference()
    result = harness.PipelineResult(ws.cfg, {"A": model}, _posterior(model), ws.splits(),
                                    ws.maps())
    rows = harness.sweep(args.axis, values, ws.cfg, result, ws.path(f"sweep_{args.axis}.csv"))
    accs = [r["acc_at_half"] for r in rows]
    ws.manifest.metrics[f"sweep_{args.axis}"] = {
        "rows": rows, "acc_spread": float(max(accs) - min(accs)),
        "interior_optimum": harness.interior_optimum(values, accs)}
    ws.manifest.stage("sweep", t0, axis=args.axis, values=values)
    print(f"wrote sweep_{args.axis}.csv ({len(rows)} rows)")


def cmd_run(ws: Workspace, args) -> None:
    for name in ("gen-data", "train-diffusion", "gen-data", "fit-laplace", "estimate",
                 "train-detector", "evaluate", "export-hist"):
        COMMANDS[name](ws, args)
        ws.save()


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-diffusion": cmd_train_diffusion,
    "fit-laplace": cmd_fit_laplace,
    "estimate": cmd_estimate,
    "train-detector": cmd_train_detector,
    "evaluate": cmd_evaluate,
    "export-hist": cmd_export_hist,
    "sweep": cmd_sweep,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffuq", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file with flat pipeline settings")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="runs/default", help="working directory (default %(default)s)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name in ("export-hist", "run"):
            sp.add_argument("--tags", default="real,A",
                            help="generator tags to histogram (default %(default)s)")
            sp.add_argument("--bins", type=int, help="histogram bins (config hist_bins)")
        if name == "sweep":
            sp.add_argument("--axis", required=True, choices=sorted(harness.SWEEP_AXES))
            sp.add_argument("--values", required=True, help="comma-separated values")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.PipelineConfig.from_json(args.config) if args.config else harness.PipelineConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        ws = Workspace(args.out, cfg)
        COMMANDS[args.command](ws, args)
        ws.save()
    except DiffuqError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
