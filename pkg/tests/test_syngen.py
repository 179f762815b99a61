import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synfed import datakit, syngen, trainer
from synfed.datakit import BlobBenchmarkConfig, Dataset, LabelRegistry
from synfed.errors import ShapeError, TemplateError, ValidationError
from synfed.nnkit import ModelArch
from synfed.syngen import OracleConfig, SyntheticVolume


def _oracle(k=3, d=4, gap=0.0, rho=0.0, std=1.0):
    means = 3.0 * np.eye(k, d)
    return OracleConfig(LabelRegistry.numbered(k), means, std, domain_gap=gap, variance_inflation=rho, direction_seed=5)


class TestPrompts:
    def test_empty(self):
        assert syngen.make_prompts(LabelRegistry.numbered(3), "x {label}", 0, 0) == []

    def test_substitution(self):
        reg = LabelRegistry(("airplane", "ship"))
        recs = [r for r in syngen.make_prompts(reg, "a photo of {label}", 2, 0) if r.label == "airplane"]
        assert len(recs) == 2
        assert all(r.text == "a photo of airplane" for r in recs)

    def test_counts_per_label(self):
        reg = LabelRegistry.numbered(4)
        recs = syngen.make_prompts(reg, "{label}", 7, 1)
        assert [sum(r.label == n for r in recs) for n in reg.names] == [7] * 4

    def test_guidance_mean(self):
        recs = syngen.make_prompts(LabelRegistry.numbered(10), "{label}", 1000, 3)
        g = np.array([r.guidance_scale for r in recs])
        assert len(g) == 10_000
        assert g.min() >= 1.0 and g.max() <= 5.0
        assert 2.9 <= g.mean() <= 3.1

    @pytest.mark.parametrize("template", ["no slot", "{label} and {label}", "{lab}"])
    def test_bad_template(self, template):
        with pytest.raises(TemplateError):
            syngen.make_prompts(LabelRegistry.numbered(2), template, 1, 0)

    def test_guidance_range_enforced(self):
        with pytest.raises(ValidationError):
            syngen.PromptRecord("a", "t", 5.5)

    def test_tsv_round_trip(self, tmp_path):
        recs = syngen.make_prompts(LabelRegistry(("cat", "dog")), "a {label} sitting", 3, 2)
        back = syngen.read_prompts(syngen.write_prompts(recs, tmp_path / "p.tsv"))
        assert back == recs
        first = (tmp_path / "p.tsv").read_text().splitlines()[0].split("\t")
        assert first[0] == "cat" and first[2] == "a cat sitting"

    def test_deterministic(self):
        reg = LabelRegistry.numbered(3)
        assert syngen.make_prompts(reg, "{label}", 4, 9) == syngen.make_prompts(reg, "{label}", 4, 9)


class TestOracle:
    def test_directions_unit(self):
        u = syngen.shift_directions(10, 32, 0)
        assert np.all(np.abs(np.linalg.norm(u, axis=1) - 1.0) <= 1e-9)

    def test_rejects_non_unit_direction(self):
        with pytest.raises(ValidationError):
            OracleConfig(LabelRegistry.numbered(2), np.zeros((2, 3)), 1.0, shift_directions=np.ones((2, 3)))

    def test_rejects_negative_knobs(self):
        with pytest.raises(ValidationError):
            _oracle(gap=-1.0)

    def test_in_domain_means(self):
        o = _oracle()
        ds = syngen.generate_synthetic(o, SyntheticVolume(1.0), 3000, 0)
        for c in range(3):
            pts = ds.features[ds.labels == c]
            assert len(pts) == 1000
            assert np.max(np.abs(pts.mean(axis=0) - o.base_means[c])) <= 4.0 / math.sqrt(1000)

    @pytest.mark.parametrize("rho", [0.0, 0.5])
    def test_shifted_means(self, rho):
        o = _oracle(gap=2.0, rho=rho)
        bound = 4.0 * math.sqrt(1 + rho) / math.sqrt(1000)
        for seed in range(10):
            ds = syngen.generate_synthetic(o, SyntheticVolume(1.0), 3000, seed)
            for c in range(3):
                pts = ds.features[ds.labels == c]
                target = o.base_means[c] + 2.0 * o.shift_directions[c]
                assert np.max(np.abs(pts.mean(axis=0) - target)) <= bound

    def test_variance_inflation(self):
        o = _oracle(rho=3.0)
        ds = syngen.generate_synthetic(o, SyntheticVolume(1.0), 30_000, 0)
        pts = ds.features[ds.labels == 0]
        assert pts.std(axis=0) == pytest.approx(np.full(4, 2.0), rel=0.03)

    def test_volume_arithmetic(self):
        o = OracleConfig(LabelRegistry.numbered(10), np.zeros((10, 2)), 1.0)
        ds = syngen.generate_synthetic(o, SyntheticVolume(1.0), 900, 0)
        assert np.all(ds.class_counts() == 90)
        assert ds.provenance == "synthetic"

    def test_remainder_to_lowest_ids(self):
        assert list(syngen.per_class_counts(23, 5)) == [5, 5, 5, 4, 4]

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 5.0), st.integers(1, 500), st.integers(2, 12))
    def test_uniform_counts(self, mult, real, k):
        o = OracleConfig(LabelRegistry.numbered(k), np.zeros((k, 1)), 1.0)
        vol = SyntheticVolume(mult)
        if vol.total(real) < 1:
            return
        counts = syngen.generate_synthetic(o, vol, real, 0).class_counts()
        assert counts.sum() == round(mult * real)
        assert counts.max() - counts.min() <= 1

    def test_deterministic(self):
        o = _oracle(gap=1.0)
        assert syngen.generate_synthetic(o, SyntheticVolume(2.0), 50, 4) == syngen.generate_synthetic(o, SyntheticVolume(2.0), 50, 4)

    def test_invalid_volume(self):
        with pytest.raises(ValidationError):
            SyntheticVolume(0.0)

    def test_gap_monotone_pretrain_accuracy(self):
        cfg = BlobBenchmarkConfig(samples_per_class=300)
        train, test = datakit.make_blob_benchmark(cfg, 0)
        arch = ModelArch(32, 32, 10)
        means = []
        for gap in (0.0, 1.0, 2.0, 4.0):
            o = OracleConfig.from_benchmark(cfg, train.registry, domain_gap=gap * cfg.within_class_std)
            accs = []
            for s in range(5):
                syn = syngen.generate_synthetic(o, SyntheticVolume(1.0), len(train), s)
                ck = trainer.pretrain(arch, syn, trainer.TrainConfig(epochs=10, weight_decay=0.1, seed=s))
                accs.append(trainer.evaluate(ck.params, test).accuracy)
            means.append(np.mean(accs))
        assert all(a >= b for a, b in zip(means, means[1:]))


class TestIngest:
    def test_round_trip(self, tmp_path):
        o = _oracle()
        syn = syngen.generate_synthetic(o, SyntheticVolume(1.0), 30, 0)
        path = datakit.save_dataset(syn, tmp_path / "gen.csv")
        back = syngen.ingest_external(path, o.registry, input_dim=4)
        assert np.array_equal(back.features, syn.features)
        assert np.array_equal(back.labels, syn.labels)
        assert back.provenance == "external"

    def test_names_remapped_through_manifest(self, tmp_path):
        ds = Dataset(np.eye(2), [0, 1], LabelRegistry(("dog", "cat")))
        path = datakit.save_dataset(ds, tmp_path / "g.csv")
        back = syngen.ingest_external(path, LabelRegistry(("cat", "dog")))
        assert list(back.labels) == [1, 0]

    def test_unknown_name_listed(self, tmp_path):
        path = tmp_path / "g.csv"
        path.write_text("label,f0\ncat,1.0\ncaat,2.0\n")
        with pytest.raises(ValidationError, match="caat"):
            syngen.ingest_external(path, LabelRegistry(("cat", "dog")))

    def test_empty_data(self, tmp_path):
        path = tmp_path / "g.csv"
        path.write_text("label,f0\n")
        with pytest.raises(ValidationError):
            syngen.ingest_external(path, LabelRegistry(("cat", "dog")))

    def test_dim_mismatch(self, tmp_path):
        path = tmp_path / "g.csv"
        path.write_text("label,f0,f1\ncat,1.0,2.0\n")
        with pytest.raises(ShapeError):
            syngen.ingest_external(path, LabelRegistry(("cat", "dog")), input_dim=3)
