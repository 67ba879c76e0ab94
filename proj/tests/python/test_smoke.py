import json
import math

import numpy as np
import pytest

import dpl


def test_score_symmetry():
    a = dpl.score_from_similarities(0.31, 0.12, 0.07)
    b = dpl.score_from_similarities(0.12, 0.31, 0.07)
    assert abs(a + b - 1.0) < 1e-12
    assert dpl.score_from_similarities(0.2, 0.2) == 0.5


def test_quantizer_roundtrip():
    scores = [i / 10 for i in range(11)]
    q = dpl.fit_quantizer(scores, 5)
    assert q.levels == 5
    assert len(q.boundaries) == 4
    assert q(1.0) == 1
    assert q(0.0) == 5
    again = dpl.Quantizer.from_text(q.to_text())
    assert again.boundaries == q.boundaries
    with pytest.raises(dpl.InsufficientDataError):
        dpl.fit_quantizer([0.1, 0.2], 5)


def test_auc_and_rewards():
    assert dpl.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(dpl.SingleClassError):
        dpl.auc([0.1, 0.2], [1, 1])
    rewards, returns = dpl.rewards([0.5, 0.9, 0.7])
    assert rewards == pytest.approx([0.4, -0.2])
    assert returns[0] == pytest.approx(0.9 - 0.5 + 0.7 - 0.9)
    assert dpl.clipped_surrogate(1.5, 2.0, 0.2) == pytest.approx(2.4)
    assert dpl.clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)


def test_image_ops():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    assert 0.0 <= dpl.stub_indicator(img, "vqi") <= 1.0
    assert np.array_equal(dpl.perturb(img, "noise", 0), img)
    noisy = dpl.perturb(img, "noise", 3, seed=5)
    assert np.array_equal(noisy, dpl.perturb(img, "noise", 3, seed=5))
    assert dpl.jpeg_roundtrip(img, 50).shape == img.shape
    with pytest.raises(ValueError):
        dpl.stub_indicator(img, "xyz")


def test_sha256():
    assert dpl.sha256(b"abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_config_validation(tmp_path):
    c = dpl.load_config({"seed": 3})
    assert c["seed"] == 3
    with pytest.raises(dpl.ConfigError, match="training.epochs"):
        dpl.load_config({"training": {"epochs": 3}})


def test_end_to_end(tmp_path):
    data = tmp_path / "data"
    n = dpl.make_synthetic_dataset(str(data), n_per_class=12, artifact_strength=1.0, seed=2,
                                   image_size=64, test_fraction=0.25)
    assert n == 24
    config = {
        "seed": 2,
        "output_dir": str(tmp_path / "run"),
        "model": {"backbone": {"name": "tiny", "output_channels": 8}, "hidden_size": 8, "proposer_hidden": 8},
        "indicators": {"quality_levels": 3, "identifiability_levels": 3},
        "training": {"stage1_epochs": 1, "stage2_epochs": 1, "batch_size": 8},
        "ppo": {"ppo_epochs_per_batch": 1},
        "data": {"train_manifest": str(data / "manifest.tsv"), "test_manifest": str(data / "manifest.tsv"),
                 "image_size": 64},
    }
    hist_q, hist_f = dpl.fit_indicators(config)
    assert sum(hist_q) == 18 and sum(hist_f) == 18
    ckpt = dpl.train(config)
    report = dpl.evaluate(ckpt)
    assert report["n_samples"] == 6
    assert 0.0 <= report["auc"] <= 1.0
    assert report == dpl.evaluate(ckpt)
    out = tmp_path / "emb.tsv"
    assert dpl.export_embeddings(ckpt, str(out)) == 6
    assert len(out.read_text().splitlines()) == 2 + 6
