"""Manifest/array round trips and checkpoint save/load."""

import json

import numpy as np
import pytest
import torch

from smsrecon.dataset import (
    CHECKPOINT_FORMAT,
    DATASET_FORMAT,
    DatasetReader,
    DatasetWriter,
    ManifestError,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    write_key_value_config,
)
from smsrecon.unrolled import UnrolledConfig, build_model


def test_array_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a/complex": (rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))).astype(np.complex64),
        "a/f32": rng.standard_normal((5,)).astype(np.float32),
        "b/f64": rng.standard_normal((2, 2, 2)),
        "b/flags": (rng.random((4, 4)) < 0.5).astype(np.uint8),
    }
    writer = DatasetWriter(tmp_path / "ds")
    for name, arr in arrays.items():
        writer.add(name, arr)
    writer.finish()
    reader = DatasetReader(tmp_path / "ds")
    for name, arr in arrays.items():
        back = reader.load(name)
        assert back.dtype == arr.dtype or (arr.dtype == np.uint8)
        assert np.array_equal(back, arr)


def test_manifest_validates_sizes(tmp_path):
    writer = DatasetWriter(tmp_path / "ds")
    writer.add("x", np.zeros((4, 4), dtype=np.float32))
    manifest = writer.finish()
    # corrupt the file
    path = tmp_path / "ds" / manifest.entry("x").path
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "ds")


def test_manifest_rejects_unknown_format(tmp_path):
    writer = DatasetWriter(tmp_path / "ds")
    writer.add("x", np.zeros(2, dtype=np.float32))
    writer.finish()
    with pytest.raises(ManifestError):
        DatasetReader(tmp_path / "ds", expected_format=CHECKPOINT_FORMAT)


def test_duplicate_names_rejected(tmp_path):
    writer = DatasetWriter(tmp_path / "ds")
    writer.add("x", np.zeros(2, dtype=np.float32))
    with pytest.raises(ManifestError):
        writer.add("x", np.zeros(2, dtype=np.float32))


def test_manifest_is_self_describing(tmp_path):
    writer = DatasetWriter(tmp_path / "ds", meta={"seed": 7})
    writer.add("y", np.zeros((2, 3), dtype=np.complex64))
    writer.finish()
    doc = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert doc["format"] == DATASET_FORMAT
    entry = doc["arrays"][0]
    assert entry["name"] == "y"
    assert entry["dtype"] == "c64"
    assert entry["shape"] == [2, 3]
    assert entry["byte_order"] == "little"
    assert doc["meta"]["seed"] == 7


def test_checkpoint_roundtrip(tmp_path):
    cfg = UnrolledConfig(num_unrolls=2, cg_iters_per_dc=3, num_res_blocks=1, channels=4)
    model = build_model(cfg, mu_init=0.07, seed=3, dtype=torch.float32)
    save_checkpoint(tmp_path / "ckpt", model, training_config={"seed": 3, "epochs": 5},
                    seed=3)
    back, meta = load_checkpoint(tmp_path / "ckpt")
    assert meta["architecture"] == cfg.to_dict()
    assert abs(meta["mu"] - 0.07) < 1e-6
    assert back.config == cfg
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2
        assert torch.equal(p1, p2)
    assert (tmp_path / "ckpt" / "training_config.txt").exists()


def test_key_value_config_flattens(tmp_path):
    write_key_value_config(tmp_path / "cfg.txt", {"a": 1, "b": {"c": 2.5, "d": "x"}})
    text = (tmp_path / "cfg.txt").read_text()
    assert "a = 1\n" in text
    assert "b.c = 2.5\n" in text
    assert 'b.d = "x"\n' in text
