import csv
import json

import numpy as np
import pytest
from scipy import stats

from diffuq import harness
from diffuq.errors import DataError, ParameterError
from diffuq.uncertainty import UncertaintyMap

from tiny import TINY


@pytest.fixture(scope="module")
def tiny_result():
    return harness.run_pipeline(harness.PipelineConfig(**TINY))


def _maps(values, side=2):
    return [UncertaintyMap(np.full((side, side), v), np.full((side, side), 2 * v),
                           np.full((side, side), 3 * v)) for v in values]


class TestPipelineConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = harness.PipelineConfig(**TINY)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert harness.PipelineConfig.from_json(path) == cfg

    def test_unknown_key(self):
        with pytest.raises(ParameterError, match="unknown"):
            harness.PipelineConfig.from_dict({"seed": 1, "epochz": 3})

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ParameterError):
            harness.PipelineConfig.from_json(tmp_path / "bad.json")

    def test_step_count_per_generator(self):
        with pytest.raises(ParameterError):
            harness.PipelineConfig(ddim_steps=[10, 20])

    def test_derived_configs(self):
        cfg = harness.PipelineConfig(seed=7, t=300, m0=0.4)
        assert cfg.unc().t == 300
        assert cfg.loss().m0 == 0.4
        assert [cfg.generator_seed(t) for t in "ABC"] == [7, 8, 9]
        assert cfg.schedule().T == 1000


class TestGap:
    def test_hand_value(self):
        # means 2 and 0, unbiased variances 1 and 1
        assert harness.standardized_gap(np.array([1.0, 2.0, 3.0]),
                                        np.array([-1.0, 0.0, 1.0])) == pytest.approx(2.0)

    def test_sign_and_degenerate(self):
        a, b = np.array([0.0, 1.0]), np.array([2.0, 3.0])
        assert harness.standardized_gap(a, b) == -harness.standardized_gap(b, a)
        assert harness.standardized_gap(np.ones(3), np.ones(3)) == 0.0

    def test_separability_orientation(self):
        maps = _maps([3.0, 4.0, 5.0, 0.5, 1.0, 1.5])
        sep = harness.separability(maps, [0, 0, 0, 1, 1, 1])
        assert sep["epistemic"]["auroc"] == 1.0
        assert sep["epistemic"]["gap"] > 0
        assert sep["recon"]["mean_fake"] == pytest.approx(3.0)


class TestHistograms:
    def test_counts_and_edges(self, tmp_path):
        vals = [0.0, 0.1, 0.2, 0.9, 1.0, 0.5]
        labels = [0, 0, 0, 1, 1, 1]
        files = harness.export_histograms(_maps(vals), labels, 4, tmp_path)
        assert set(files) == {"recon", "aleatoric", "epistemic", "summary"}
        with open(files["epistemic"]) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        np.testing.assert_allclose([float(r["bin_left"]) for r in rows], [0, 0.25, 0.5, 0.75])
        assert float(rows[-1]["bin_right"]) == 1.0
        assert [int(r["count_real"]) for r in rows] == [3, 0, 0, 0]
        assert [int(r["count_fake"]) for r in rows] == [0, 0, 1, 2]
        with open(files["recon"]) as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[-1]["bin_right"]) == pytest.approx(3.0)

    def test_counts_sum(self, tmp_path):
        rng = np.random.default_rng(0)
        vals = rng.exponential(size=50)
        labels = rng.integers(0, 2, 50)
        files = harness.export_histograms(_maps(vals), labels, 7, tmp_path)
        with open(files["aleatoric"]) as fh:
            rows = list(csv.DictReader(fh))
        assert sum(int(r["count_real"]) for r in rows) == int((labels == 0).sum())
        assert sum(int(r["count_fake"]) for r in rows) == int((labels == 1).sum())

    def test_summary_single_class(self, tmp_path):
        files = harness.export_histograms(_maps([1.0, 2.0]), [0, 0], 3, tmp_path)
        with open(files["summary"]) as fh:
            row = next(csv.DictReader(fh))
        assert row["gap"] == "nan" and row["n_fake"] == "0"

    def test_errors(self, tmp_path):
        with pytest.raises(DataError):
            harness.export_histograms([], [], 3, tmp_path)
        with pytest.raises(DataError):
            harness.export_histograms(_maps([1.0]), [0, 1], 3, tmp_path)


class TestSweepHelpers:
    def test_interior_optimum(self):
        assert harness.interior_optimum([0, 1, 2], [0.5, 0.9, 0.6])
        assert not harness.interior_optimum([0, 1, 2], [0.9, 0.5, 0.6])
        assert not harness.interior_optimum([0, 1, 2], [0.5, 0.6, 0.9])

    def test_bad_axis(self):
        with pytest.raises(ParameterError):
            harness.sweep("beta", [1.0], harness.PipelineConfig(**TINY), result=object())

    def test_no_values(self):
        with pytest.raises(ParameterError):
            harness.sweep("t", [], harness.PipelineConfig(**TINY), result=object())


class TestTinyPipeline:
    def test_splits(self, tiny_result):
        train, val, test = tiny_result.splits
        assert len(train) + len(val) + len(test) == 20 + 20 + 12
        assert set(train.tags) == {"real", "A"}
        assert set(test.tags) == {"real", "A", "B", "C"}
        ids = np.concatenate([s.ids for s in tiny_result.splits])
        assert len(np.unique(ids)) == len(ids)

    def test_every_image_has_a_map(self, tiny_result):
        for ds in tiny_result.splits:
            maps = tiny_result.maps_for(ds)
            assert [m.image_id for m in maps] == ds.ids.tolist()
            assert all(np.all(m.epistemic >= 0) for m in maps)

    def test_report_and_manifest(self, tiny_result):
        rep = tiny_result.report
        assert set(rep.per_generator) == {"A", "B", "C"}
        assert 0.0 <= rep.auroc <= 1.0
        stages = [s["stage"] for s in tiny_result.manifest.stages]
        assert stages == ["train-diffusion", "gen-data", "fit-laplace", "estimate",
                          "train-detector"]
        assert "separability" in tiny_result.manifest.metrics

    def test_single_value_sweep_matches_direct_run(self, tiny_result, tmp_path):
        cfg = tiny_result.cfg
        rows = harness.sweep("m0", [cfg.m0], cfg, tiny_result, tmp_path / "s.csv")
        assert len(rows) == 1
        assert rows[0]["acc_at_half"] == tiny_result.report.acc_at_half
        assert rows[0]["auroc"] == tiny_result.report.auroc
        with open(tmp_path / "s.csv") as fh:
            assert len(list(csv.reader(fh))) == 2

    def test_t_sweep_rows(self, tiny_result):
        rows = harness.sweep("t", [100, 200], tiny_result.cfg, tiny_result)
        assert [r["value"] for r in rows] == [100, 200]
        assert all("auroc_B" in r for r in rows)

    def test_manifest_round_trip(self, tiny_result, tmp_path):
        tiny_result.manifest.save(tmp_path / "m.json")
        back = harness.RunManifest.load(tmp_path / "m.json")
        assert back.config == tiny_result.cfg.to_dict()
        assert back.seeds["pipeline"] == 0


@pytest.mark.slow
class TestReferencePipeline:
    """Behaviour of the default seed-0 pipeline (shared session fixture)."""

    def test_generated_statistics(self, reference_run):
        from diffuq import datagen
        real = datagen.gen_real(500, 11)
        test = reference_run.splits[2]
        fakes = test.images[np.array(test.tags) == "C"]
        # step count 50 is the closest match to the real texture statistics
        assert abs(fakes.mean() - real.mean()) <= 0.2 * real.std()
        assert abs(fakes.std() - real.std()) <= 0.2 * real.std()

    def test_epistemic_lower_on_fakes(self, reference_run):
        sep = reference_run.manifest.metrics["separability"]["epistemic"]
        assert sep["mean_fake"] < sep["mean_real"]

    def test_epistemic_separates_better_than_recon(self, reference_run):
        sep = reference_run.manifest.metrics["separability"]
        assert abs(sep["epistemic"]["gap"]) > abs(sep["recon"]["gap"])

    def test_detector_scores_fakes_higher(self, reference_run):
        test = reference_run.splits[2]
        s = reference_run.scores
        assert s[test.labels == 1].mean() > s[test.labels == 0].mean()

    def test_generators_differ_in_recon(self, reference_run):
        test = reference_run.splits[2]
        maps = reference_run.maps_for(test)
        tags = np.array(test.tags)
        r = np.array([m.mean_recon for m in maps])
        # variants B and C (own seeds) measured under the reference model A
        p = stats.mannwhitneyu(r[tags == "B"], r[tags == "C"]).pvalue
        assert p < 0.05
