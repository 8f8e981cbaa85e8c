import json
import math
from collections import Counter

import numpy as np
import pytest

from blobsense import synth
from blobsense.errors import ConfigError, ValidationError
from blobsense.synth import GenConfig, generate, integer_box, render_image, stratified_sampler


def small_config(**kw):
    base = dict(n_images={"train": 12, "val": 2, "test": 6}, image_size=32, edge_margin=6,
                sigma_range=(1.0, 2.0),
                incidence={"normal": 0.4, "benign": 0.2, "high_risk": 0.2, "malignant": 0.2})
    base.update(kw)
    return GenConfig(**base)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestRender:
    def test_tight_boxes_without_looseness(self):
        cfg = small_config(looseness=1.0, jitter=0.0)
        rng = np.random.default_rng(3)
        seen = 0
        for stratum in ("benign", "high_risk", "malignant") * 10:
            _, anns, findings = render_image(rng, stratum, cfg)
            for ann, f in zip(anns, findings):
                tight = integer_box(f.center, (3 * f.sigmas[0], 3 * f.sigmas[1]), cfg.image_size)
                assert ann.box == tight
                seen += 1
        assert seen >= 30

    def test_loose_boxes_contain_true_center(self):
        cfg = small_config(looseness=2.5, jitter=0.5)
        rng = np.random.default_rng(4)
        for _ in range(200):
            img, anns, findings = render_image(rng, "malignant", cfg)
            assert 0.0 <= img.min() and img.max() <= 1.0
            for ann, f in zip(anns, findings):
                assert ann.contains(*f.center)

    def test_normal_has_no_annotations(self):
        _, anns, findings = render_image(np.random.default_rng(0), "normal", small_config())
        assert anns == [] and findings == []

    def test_texture_range(self):
        t = synth.texture(np.random.default_rng(0), 64, 6.0)
        assert t.min() == pytest.approx(0.1) and t.max() == pytest.approx(0.5)


class TestGenerate:
    def test_byte_identical_reruns(self, tmp_path):
        cfg = small_config(seed=7)
        generate(cfg, tmp_path / "a")
        generate(cfg, tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_seed_changes_output(self, tmp_path):
        generate(small_config(seed=1), tmp_path / "a")
        generate(small_config(seed=2), tmp_path / "b")
        assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "b")

    def test_png_encoding(self, tmp_path):
        cfg = small_config()
        generate(cfg, tmp_path)
        rec = synth.load(tmp_path, "train")[0]
        img = synth.read_image(tmp_path, rec, cfg.image_size)
        assert img.dtype == np.float32 and img.shape == (32, 32)
        raw = np.round(img.astype(np.float64) * 65535)
        np.testing.assert_allclose(raw, np.round(raw), atol=1e-3)

    def test_malignant_binomial(self, tmp_path):
        n, p = 10_000, 0.01
        cfg = GenConfig(n_images={"train": n}, image_size=16, edge_margin=3, sigma_range=(1.0, 1.5),
                        texture_scale=2.0,
                        incidence={"normal": 0.97, "benign": 0.01, "high_risk": 0.01, "malignant": p})
        summary = generate(cfg, tmp_path)["summary"]["train"]["images"]
        sd = math.sqrt(n * p * (1 - p))
        assert abs(summary["malignant"] - n * p) <= 3 * sd

    def test_invalid_config(self, tmp_path):
        with pytest.raises(ConfigError):
            generate(small_config(looseness=0.5), tmp_path)
        with pytest.raises(ConfigError):
            generate(small_config(incidence={"normal": 0.5, "benign": 0.2, "high_risk": 0.2, "malignant": 0.2}), tmp_path)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            GenConfig.from_dict({"colour": 3})
        assert GenConfig.from_dict({"sigma_range": [1, 2]}).sigma_range == (1, 2)


class TestLoad:
    def test_round_trip_and_summary(self, tmp_path):
        manifest = generate(small_config(), tmp_path)
        for split in ("train", "val", "test"):
            records = synth.load(tmp_path, split)
            assert len(records) == small_config().n_images[split]
            labels = Counter(a.label for r in records for a in r.annotations)
            expected = manifest["summary"][split]["annotations"]
            assert {k: labels.get(k, 0) for k in expected} == expected
            for r in records:
                assert (tmp_path / r.image_path).is_file()
                if r.stratum == "normal":
                    assert r.annotations == []

    def test_inverted_box_names_record(self, tmp_path):
        generate(small_config(incidence={"normal": 0.0, "benign": 0.0, "high_risk": 0.0, "malignant": 1.0}), tmp_path)
        path = tmp_path / "manifest.json"
        manifest = json.loads(path.read_text())
        rec = manifest["records"][2]
        box = rec["annotations"][0]["box"]
        box[0], box[2] = box[2] + 1, box[0]
        path.write_text(json.dumps(manifest))
        with pytest.raises(ValidationError, match=rec["image_id"]):
            synth.load(tmp_path, rec["split"])

    def test_unknown_label(self, tmp_path):
        generate(small_config(incidence={"normal": 0.0, "benign": 1.0, "high_risk": 0.0, "malignant": 0.0}), tmp_path)
        path = tmp_path / "manifest.json"
        manifest = json.loads(path.read_text())
        manifest["records"][0]["annotations"][0]["label"] = "suspicious"
        path.write_text(json.dumps(manifest))
        with pytest.raises(ValidationError):
            synth.load(tmp_path)

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(ValidationError):
            synth.load(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            synth.load(tmp_path)


class TestSampler:
    STRATA = ["normal"] * 7 + ["benign"] * 3 + ["high_risk"] + ["malignant"] * 2

    def test_multinomial_bounds(self):
        sampler = synth.StratifiedSampler(self.STRATA, seed=0)
        counts = Counter(self.STRATA[next(sampler)] for _ in range(8000))
        sd = math.sqrt(8000 * 0.25 * 0.75)
        for s in synth.STRATA:
            assert abs(counts[s] - 2000) <= 3 * sd, (s, counts[s])

    def test_one_image_per_stratum(self):
        sampler = synth.StratifiedSampler(["malignant", "normal", "benign", "high_risk"], seed=1)
        assert {next(sampler) for _ in range(200)} == {0, 1, 2, 3}

    def test_same_seed_same_prefix(self):
        a = synth.StratifiedSampler(self.STRATA, seed=5)
        b = synth.StratifiedSampler(self.STRATA, seed=5)
        assert [next(a) for _ in range(10_000)] == [next(b) for _ in range(10_000)]

    def test_state_resume(self):
        a = synth.StratifiedSampler(self.STRATA, seed=5)
        [next(a) for _ in range(17)]
        state = a.state
        tail = [next(a) for _ in range(50)]
        b = synth.StratifiedSampler(self.STRATA, seed=99)
        b.set_state(state)
        assert [next(b) for _ in range(50)] == tail

    def test_empty_stratum_named(self):
        with pytest.raises(ConfigError, match="high_risk"):
            synth.StratifiedSampler(["normal", "benign", "malignant"])

    def test_from_records(self, tmp_path):
        generate(small_config(n_images={"train": 40}), tmp_path)
        records = synth.load(tmp_path, "train")
        ids = [records[next(stratified_sampler(records, seed=0))].image_id]
        assert ids[0].startswith("train_")
