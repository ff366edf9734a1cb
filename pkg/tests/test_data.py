import json

import numpy as np
import pytest
from scipy import stats

from tatl.data import (
    PRESETS,
    GenConfig,
    generate,
    load,
    network_input,
    read_tensor,
    resize_image,
    save,
    stack,
    standardize,
    write_tensor,
)
from tatl.errors import DataError, IoError, RangeError
from tatl.maskops import ATTRIBUTES, union_mask
from tatl.training import TrainPlan, run_pipeline


def presence(samples, attribute):
    return sum(attribute in s.masks.masks for s in samples)


class TestGenerate:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_streaks_rate_binomial_interval(self, seed):
        samples = generate(GenConfig(n_samples=1000, image_size=8, seed=seed))
        lo, hi = stats.binom.interval(0.99, 1000, PRESETS["isic2018"]["S"])
        assert lo <= presence(samples, "S") <= hi

    def test_chi_square_all_attributes(self):
        n = 5000
        samples = generate(GenConfig(n_samples=n, image_size=8, seed=11))
        rates = PRESETS["isic2018"]
        chi2 = sum((presence(samples, a) - n * p) ** 2 / (n * p * (1 - p)) for a, p in rates.items())
        assert chi2 <= stats.chi2.ppf(0.99, df=len(rates))

    def test_isic2017_has_no_globules(self):
        assert presence(generate(GenConfig(n_samples=200, image_size=8, preset="isic2017")), "G") == 0

    def test_all_zero_probabilities(self):
        cfg = GenConfig(n_samples=30, image_size=16, preset="custom", probabilities={})
        for s in generate(cfg):
            assert not s.masks.masks
            assert not union_mask(s.masks).any()

    def test_masks_inside_lesion(self):
        for s in generate(GenConfig(n_samples=100, preset="uniform", seed=3)):
            for m in s.masks.masks.values():
                assert m.any()
                assert np.all(m <= s.masks.lesion)
            assert union_mask(s.masks).any() == bool(s.masks.masks)

    def test_image_range_and_shape(self):
        for s in generate(GenConfig(n_samples=20, image_size=16, seed=4)):
            assert s.image.shape == (1, 16, 16)
            assert s.image.min() >= 0 and s.image.max() <= 1

    def test_lesion_darker(self):
        for s in generate(GenConfig(n_samples=20, preset="custom", probabilities={}, seed=4)):
            lesion = s.masks.lesion.astype(bool)
            assert s.image[0][lesion].mean() < s.image[0][~lesion].mean()

    def test_deterministic_files(self, tmp_path):
        for d in ("a", "b"):
            save(generate(GenConfig(n_samples=10, seed=7)), tmp_path / d)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_bad_config(self):
        with pytest.raises(ValueError):
            generate(GenConfig(preset="nosuch"))
        with pytest.raises(RangeError):
            generate(GenConfig(preset="custom", probabilities={"S": 1.5}))
        with pytest.raises(ValueError):
            generate(GenConfig(preset="custom"))


class TestResize:
    def test_identity(self, rng):
        x = rng.random((2, 5, 7))
        np.testing.assert_array_equal(resize_image(x, 5, 7), x)

    def test_hand_bilinear(self):
        out = resize_image(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 4)
        np.testing.assert_allclose(out, [[0, 0.25, 0.75, 1]] * 2, atol=1e-15)

    def test_constant(self):
        out = resize_image(np.full((3, 5), 0.3), 11, 2)
        np.testing.assert_allclose(out, 0.3, atol=1e-15)

    def test_range_preserved(self, rng):
        x = rng.random((9, 4))
        out = resize_image(x, 17, 13)
        assert out.min() >= x.min() and out.max() <= x.max()


class TestFiles:
    def test_tensor_round_trip(self, tmp_path, rng):
        x = rng.standard_normal((1, 3, 4))
        write_tensor(tmp_path / "t.tatlt", x)
        raw = (tmp_path / "t.tatlt").read_bytes()
        assert raw.startswith(b"TATLT\0")
        np.testing.assert_array_equal(read_tensor(tmp_path / "t.tatlt"), x)

    def test_tensor_corrupt(self, tmp_path):
        (tmp_path / "bad.tatlt").write_bytes(b"TATLT\0\x01\x00\x01\x05\x00\x00\x00" + b"\0" * 8)
        with pytest.raises(IoError):
            read_tensor(tmp_path / "bad.tatlt")

    def test_save_load_round_trip(self, tmp_path):
        samples = generate(GenConfig(n_samples=15, image_size=16, preset="uniform", seed=2))
        manifest = save(samples, tmp_path)
        back = load(manifest)
        assert [s.id for s in back] == [s.id for s in samples]
        for a, b in zip(samples, back):
            np.testing.assert_array_equal(a.image, b.image)
            assert set(a.masks.masks) == set(b.masks.masks)
            for attr in ATTRIBUTES:
                np.testing.assert_array_equal(a.target(attr), b.target(attr))
            np.testing.assert_array_equal(a.masks.lesion, b.masks.lesion)

    def test_manifest_format(self, tmp_path):
        manifest = save(generate(GenConfig(n_samples=3, image_size=8, seed=1)), tmp_path)
        for line in manifest.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            assert set(rec) == {"id", "image", "masks", "lesion"}
            assert set(rec["masks"]) == set(ATTRIBUTES)

    def test_missing_file_named(self, tmp_path):
        manifest = save(generate(GenConfig(n_samples=3, image_size=8, seed=1)), tmp_path)
        victim = tmp_path / "images" / "s00001.tatlt"
        victim.unlink()
        with pytest.raises(IoError) as err:
            load(manifest)
        assert "s00001.tatlt" in str(err.value)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IoError):
            load(tmp_path / "nope.jsonl")

    def test_without_lesions_stage1_fails(self, tmp_path):
        manifest = save(generate(GenConfig(n_samples=6, image_size=16, seed=1)), tmp_path)
        lines = [json.loads(x) for x in manifest.read_text().splitlines()]
        for rec in lines:
            rec["lesion"] = None
        manifest.write_text("".join(json.dumps(r) + "\n" for r in lines))
        samples = load(manifest)
        assert all(s.masks.lesion is None for s in samples)
        with pytest.raises(DataError):
            run_pipeline(samples, TrainPlan(stages=(1, 2, 3)))


class TestStack:
    def test_standardize(self, rng):
        x = standardize(rng.random((3, 1, 8, 8)) * 5 + 2)
        np.testing.assert_allclose(x.mean(axis=(-2, -1)), 0, atol=1e-12)
        np.testing.assert_allclose(x.std(axis=(-2, -1)), 1, atol=1e-12)
        assert np.all(standardize(np.full((1, 1, 2, 2), 3.0)) == 0)

    def test_targets(self):
        samples = generate(GenConfig(n_samples=6, image_size=8, preset="uniform", seed=3))
        x, y = stack(samples, "P")
        assert x.shape == (6, 1, 8, 8) and y.shape == (6, 8, 8)
        np.testing.assert_array_equal(x, network_input(samples))
        _, u = stack(samples, union=True)
        assert np.all(u >= y)
        _, lesion = stack(samples)
        assert np.all(lesion >= u)

    def test_empty(self):
        with pytest.raises(DataError):
            stack([])
