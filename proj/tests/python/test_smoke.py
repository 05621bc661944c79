import math

import numpy as np
import pytest

import litediff


def test_schedule_is_variance_preserving():
    for T in (1, 10, 200):
        s = litediff.schedule(T)
        a, sg = np.array(s["alpha"]), np.array(s["sigma"])
        assert len(a) == T + 1
        assert np.max(np.abs(a**2 + sg**2 - 1.0)) < 1e-12


def test_loss_arithmetic():
    assert abs(litediff.discriminator_loss(0.5, 0.5) - math.log(2.0)) < 1e-12
    assert abs(litediff.total_gen_loss(0.5, 0.693147, 0.2) - 0.5695147) < 1e-9
    z = np.random.default_rng(0).normal(size=(4, 32))
    assert litediff.morph_loss(z, z) == 0.0


def test_frechet_matches_diagonal_closed_form():
    rng = np.random.default_rng(3)
    mu_a, mu_b = rng.normal(size=5), rng.normal(size=5)
    va, vb = rng.uniform(0.1, 2.0, size=5), rng.uniform(0.1, 2.0, size=5)
    got = litediff.frechet_distance(mu_a, np.diag(va), mu_b, np.diag(vb))
    want = np.sum((mu_a - mu_b) ** 2) + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2)
    assert abs(got - want) < 1e-8


def test_fit_gaussian_matches_numpy():
    x = np.random.default_rng(1).normal(size=(100, 6))
    mean, cov = litediff.fit_gaussian(x)
    assert np.allclose(mean, x.mean(axis=0), atol=1e-12)
    assert np.allclose(cov, np.cov(x, rowvar=False), atol=1e-12)


def test_patterns_and_fraction():
    assert litediff.resolve_pattern("all") == list(range(7))
    assert litediff.resolve_pattern("alternate") == [0, 2, 4, 6]
    assert litediff.resolve_pattern("skip_two") == [0, 3, 6]
    assert len(litediff.ablation_patterns()) == 7
    assert 0.0 < litediff.trainable_fraction("all") < 0.10


def test_generate_and_pgm_round_trip():
    images, classes = litediff.generate("morph_lungs", 3, 5)
    assert images.shape == (3, 1, 64, 64)
    assert len(classes) == 3
    assert images.min() >= -1.0 and images.max() <= 1.0
    blob = litediff.encode_pgm(images[0, 0], 5)
    assert blob.startswith(b"P5")
    once = litediff.decode_pgm(blob)
    assert litediff.encode_pgm(once, 5) == blob


def test_config_parsing():
    cfg = litediff.parse_config("epochs = 3\nhook_pattern = skip_up\n")
    assert cfg["epochs"] == "3"
    assert cfg["hook_pattern"] == "skip_up"
    assert set(cfg) == set(litediff.config_keys())
    with pytest.raises(litediff.ConfigError, match="bogus"):
        litediff.parse_config("bogus = 1\n")


def test_cli_in_process(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("datagen_count = 2\n")
    assert litediff.run_cli(["datagen", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    manifest = (tmp_path / "out" / "datagen" / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "file,class,seed" and len(manifest) == 3
    bad = tmp_path / "bad.cfg"
    bad.write_text("resolution = 12\n")
    assert litediff.run_cli(["datagen", "--config", str(bad)]) == 2
