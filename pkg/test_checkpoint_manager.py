#!/usr/bin/env python3
"""
Tests for the binary checkpoint format: exact round trips, corruption
detection and all-or-nothing loading.
"""
import os

import pytest
import torch

from checkpoint_manager import MAGIC, checkpoint_load, checkpoint_save, read_checkpoint
from core_utils import VARIANT_DCGAN, VARIANT_USE, VARIANT_USE_CMHSA, CheckpointError
from function.autodiff import make_generator
from gan_training import ModelConfig, build_model, build_optimizers, train_step


def _cfg(variant=VARIANT_USE_CMHSA, **overrides):
    params = dict(variant=variant, latent_dim=8, base_width=8, image_size=16)
    params.update(overrides)
    return ModelConfig(**params)


def _real(seed):
    return torch.rand(4, 3, 16, 16, generator=make_generator(seed)) * 2 - 1


def _trained(cfg, steps=2):
    G, D = build_model(cfg)
    opts = build_optimizers(G, D)
    rng = make_generator(1)
    for step in range(steps):
        train_step(G, D, _real(step), opts, rng)
    return G, D, opts


def _assert_same_state(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    for key in sa:
        assert torch.equal(sa[key], sb[key]), key


@pytest.fixture
def saved(tmp_path):
    cfg = _cfg()
    G, D, opts = _trained(cfg)
    path = str(tmp_path / "model.ckpt")
    checkpoint_save(path, G, D, opts, extra={"note": "unit"},
                    extra_tensors={"rng": torch.arange(5, dtype=torch.uint8)})
    return path, cfg, G, D, opts


def test_round_trip_is_bit_exact(saved):
    path, cfg, G, D, opts = saved
    G2, D2 = build_model(cfg)
    opts2 = build_optimizers(G2, D2)
    payload = checkpoint_load(path, G2, D2, opts2)

    _assert_same_state(G, G2)
    _assert_same_state(D, D2)
    assert opts2.step == opts.step == 2
    for a, b in ((opts.d, opts2.d), (opts.g, opts2.g)):
        sa, sb = a.state_dict()["state"], b.state_dict()["state"]
        assert sa.keys() == sb.keys()
        for index in sa:
            assert sa[index].keys() == sb[index].keys()
            for key in sa[index]:
                assert torch.equal(torch.as_tensor(sa[index][key]), torch.as_tensor(sb[index][key])), (index, key)
    assert payload.extra == {"note": "unit"}
    assert torch.equal(payload.tensors["extra.rng"], torch.arange(5, dtype=torch.uint8))


def test_training_continues_identically_after_reload(saved):
    path, cfg, G, D, opts = saved
    G2, D2 = build_model(cfg)
    opts2 = build_optimizers(G2, D2)
    checkpoint_load(path, G2, D2, opts2)
    a = train_step(G, D, _real(9), opts, make_generator(3))
    b = train_step(G2, D2, _real(9), opts2, make_generator(3))
    assert [x.item() for x in a] == [x.item() for x in b]
    _assert_same_state(G, G2)


def test_float64_round_trip(tmp_path):
    cfg = _cfg(VARIANT_DCGAN, precision="float64")
    G, D, opts = _trained(cfg, steps=1)
    path = str(tmp_path / "f64.ckpt")
    checkpoint_save(path, G, D, opts)
    G2, D2 = build_model(cfg)
    checkpoint_load(path, G2, D2)
    _assert_same_state(G, G2)


def test_identical_state_gives_identical_bytes(tmp_path):
    cfg = _cfg()
    G, D, opts = _trained(cfg, steps=1)
    a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    checksum = checkpoint_save(a, G, D, opts)
    assert checkpoint_save(b, G, D, opts) == checksum
    with open(a, "rb") as fa, open(b, "rb") as fb:
        assert fa.read() == fb.read()


def test_read_checkpoint_exposes_config(saved):
    path, cfg, *_ = saved
    payload = read_checkpoint(path)
    assert payload.model_config == cfg
    assert payload.step == 2
    with open(path, "rb") as f:
        assert f.read(len(MAGIC)) == MAGIC


def test_flipped_byte_is_detected(saved):
    path = saved[0]
    with open(path, "r+b") as f:
        f.seek(os.path.getsize(path) // 2)
        byte = f.read(1)
        f.seek(-1, os.SEEK_CUR)
        f.write(bytes([byte[0] ^ 0xFF]))
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


@pytest.mark.parametrize("keep", [0, 10, 100, -1])
def test_truncated_file_is_detected(saved, keep):
    path = saved[0]
    with open(path, "rb") as f:
        data = f.read()
    with open(path, "wb") as f:
        f.write(data[:keep])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_wrong_magic_is_detected(tmp_path):
    path = tmp_path / "not.ckpt"
    path.write_bytes(b"PNG" * 40)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(str(path))


def test_missing_file_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(str(tmp_path / "missing.ckpt"))


def test_variant_mismatch_names_both_variants(saved):
    path = saved[0]
    G, D = build_model(_cfg(VARIANT_USE))
    with pytest.raises(CheckpointError) as info:
        checkpoint_load(path, G, D)
    assert VARIANT_USE_CMHSA in str(info.value)
    assert VARIANT_USE in str(info.value)


def test_failed_load_leaves_models_untouched(saved):
    path = saved[0]
    G, D = build_model(_cfg(seed=5))
    before_g = {k: v.clone() for k, v in G.state_dict().items()}
    before_d = {k: v.clone() for k, v in D.state_dict().items()}
    with pytest.raises(CheckpointError):
        checkpoint_load(path, G, D)
    for key, value in G.state_dict().items():
        assert torch.equal(value, before_g[key])
    for key, value in D.state_dict().items():
        assert torch.equal(value, before_d[key])


def test_optimizer_state_is_required_when_requested(tmp_path):
    cfg = _cfg()
    G, D = build_model(cfg)
    path = str(tmp_path / "weights_only.ckpt")
    checkpoint_save(path, G, D, step=0)
    G2, D2 = build_model(cfg)
    with pytest.raises(CheckpointError, match="optimizer"):
        checkpoint_load(path, G2, D2, build_optimizers(G2, D2))
    checkpoint_load(path, G2, D2)
