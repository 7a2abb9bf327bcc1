"""Checkpoint format: roundtrips, corruption detection, parameter loading."""

import struct

import numpy as np
import pytest

from chartlm.checkpoint import (MAGIC, VERSION, apply_parameters,
                                collect_parameters, load_checkpoint,
                                save_checkpoint)
from chartlm.model import ChartLM, ReCatConfig


def _model(seed=0):
    cfg = ReCatConfig(layers=1, compose_depth=1, transformer_depth=1, d=8,
                      heads=2, vocab_size=12, m=2, parser_dim=6,
                      parser_hidden=6, parser_layers=1, dtype="float64")
    return ChartLM(cfg, np.random.default_rng(seed))


def test_tensor_roundtrip_is_bit_identical(tmp_path):
    path = str(tmp_path / "t.ckpt")
    tensors = {
        "a": np.arange(12, dtype=np.float64).reshape(3, 4),
        "b": np.float32([[1.5, -2.25]]),
        "scalar": np.array(7, dtype=np.int64),
        "empty": np.zeros((0, 5), dtype=np.float64),
    }
    config = {"model": {"d": 8}, "train": {"seed": 3}}
    extra = {"step": 11, "vocab": ["x", "y"]}
    save_checkpoint(path, tensors, config, extra)
    back, cfg2, extra2 = load_checkpoint(path)
    assert cfg2 == config and extra2 == extra
    assert set(back) == set(tensors)
    for name, arr in tensors.items():
        assert back[name].dtype == arr.dtype
        np.testing.assert_array_equal(back[name], arr)


def test_model_roundtrip_preserves_forward(tmp_path):
    path = str(tmp_path / "m.ckpt")
    model = _model(seed=1)
    save_checkpoint(path, collect_parameters(model), {"model": model.cfg.to_dict()})
    tensors, config, extra = load_checkpoint(path)
    assert extra == {}

    other = _model(seed=2)  # different init, then overwritten
    apply_parameters(other, tensors)
    ids = np.array([3, 5, 7, 2])
    a = model.forward_pretrain(ids)
    b = other.forward_pretrain(ids)
    np.testing.assert_array_equal(a.logits.data, b.logits.data)
    assert a.tree == b.tree


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="bad magic"):
        load_checkpoint(str(path))


def test_wrong_version(tmp_path):
    path = tmp_path / "v9.ckpt"
    header = b"{}"
    path.write_bytes(MAGIC + struct.pack("<IQ", VERSION + 8, len(header)) + header)
    with pytest.raises(ValueError, match=f"version {VERSION + 8}"):
        load_checkpoint(str(path))


def test_truncated_blob_names_tensor(tmp_path):
    path = str(tmp_path / "t.ckpt")
    save_checkpoint(path, {"w": np.ones((4, 4))}, {})
    blob = open(path, "rb").read()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="truncated checkpoint at tensor w"):
        load_checkpoint(str(cut))


def test_apply_parameters_missing_and_shape_errors():
    model = _model()
    tensors = collect_parameters(model)
    broken = dict(tensors)
    del broken["model.emb"]
    with pytest.raises(ValueError, match="missing parameter model.emb"):
        apply_parameters(model, broken)
    wrong = dict(tensors)
    wrong["model.emb"] = np.zeros((2, 2))
    with pytest.raises(ValueError, match="shape mismatch for parameter model.emb"):
        apply_parameters(model, wrong)


def test_apply_parameters_ignores_extra_keys():
    model = _model(seed=3)
    tensors = collect_parameters(model)
    tensors["opt_model.m.model.emb"] = np.zeros(3)
    apply_parameters(model, tensors)  # optimizer state alongside params is fine
    np.testing.assert_array_equal(model.parameter_map()["model.emb"].data,
                                  tensors["model.emb"])


def test_save_load_empty_extra_defaults(tmp_path):
    path = str(tmp_path / "e.ckpt")
    save_checkpoint(path, {}, {"k": 1})
    tensors, config, extra = load_checkpoint(path)
    assert tensors == {} and config == {"k": 1} and extra == {}
