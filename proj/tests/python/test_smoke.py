import json
import math

import numpy as np
import pytest

import clickseg


def test_encode_clicks_distance_and_binary():
    enc = clickseg.encode_clicks([(2, 3, 1)], 6, 7, 3, mode="distance", d_max=4.0)
    assert enc.shape == (3, 6, 7)
    assert enc.dtype == np.float32
    rows, cols = np.mgrid[0:6, 0:7]
    expected = np.maximum(0.0, 1.0 - np.hypot(rows - 2, cols - 3) / 4.0)
    np.testing.assert_allclose(enc[1], expected, rtol=1e-6, atol=1e-7)
    assert not enc[0].any() and not enc[2].any()

    disk = clickseg.encode_clicks([(2, 3, 0)], 6, 7, 2, mode="binary", disk_radius=1)
    assert disk[0].sum() == 5
    assert disk[1].sum() == 0


def test_bad_arguments_raise():
    with pytest.raises(clickseg.Error):
        clickseg.encode_clicks([], 4, 4, 2, mode="gaussian")


def test_synthetic_dataset_and_iou():
    ds = clickseg.generate_synthetic(3, size=24, n_classes=3, seed=5)
    assert [c["id"] for c in ds["classes"]] == [0, 1, 2]
    assert len(ds["tiles"]) == 3
    tile = ds["tiles"][0]
    assert tile["image"].shape == (24, 24, 3)
    gt = tile["ground_truth"]
    miou, per_class = clickseg.mean_iou(gt, gt, 3)
    assert miou == 1.0
    assert all(v is None or v == 1.0 for v in per_class)
    again = clickseg.generate_synthetic(3, size=24, n_classes=3, seed=5)
    assert again["digest"] == ds["digest"]


def test_empty_suite_runs(tmp_path):
    suite = tmp_path / "suite.yaml"
    suite.write_text(
        "name: empty\n"
        f"output: {tmp_path / 'out'}\n"
        "dataset:\n  synthetic: {tiles: 2, size: 16}\n"
    )
    report = clickseg.run_suite(suite)
    assert report["cells"] == []
    assert report["passed"] is True
    assert (tmp_path / "out" / "report" / "summary.md").exists()


def test_checkpoint_predicts_and_refines(tmp_path):
    suite = tmp_path / "suite.yaml"
    suite.write_text(
        "name: tiny\n"
        f"output: {tmp_path / 'out'}\n"
        "dataset:\n  synthetic: {tiles: 4, size: 32, seed: 2}\n  split: {ratio: 0.5}\n"
        "base:\n  epochs: 1\n  samples_per_epoch: 4\n  batch_size: 2\n  crop_size: 32\n"
        "  lr_milestones: []\n  backbone: {architecture: unet_small, encoder_width: 4}\n"
        "evaluation: {budget: 2}\n"
        "cells:\n  - name: a\n"
    )
    report = clickseg.run_suite(suite)
    assert report["cells"][0]["ok"]
    (ckpt_path,) = (tmp_path / "out" / "train").glob("*/checkpoint.ckpt")
    ckpt = clickseg.Checkpoint.load(ckpt_path)
    assert ckpt.image_channels == 3
    assert len(ckpt.classes) == 3

    ds = clickseg.load_dataset(tmp_path / "out" / "dataset" / "manifest.json")
    tile = ds["tiles"][0]
    checksum = ckpt.weights_checksum()
    labels, probs = ckpt.predict(tile["image"], [(5, 5, 2)])
    assert labels.shape == (32, 32)
    assert probs.shape == (3, 32, 32)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)
    np.testing.assert_array_equal(labels, probs.argmax(axis=0))
    again, _ = ckpt.predict(tile["image"], [(5, 5, 2)])
    np.testing.assert_array_equal(labels, again)

    traj = clickseg.refine(ckpt, tile["image"], tile["ground_truth"], budget=3, seed=1)
    assert 1 <= len(traj["steps"]) <= 4
    assert all(math.isfinite(s["mean_iou"]) for s in traj["steps"])
    assert ckpt.weights_checksum() == checksum

    with pytest.raises(clickseg.Error):
        ckpt.predict(np.zeros((8, 8, 4), np.uint8))
