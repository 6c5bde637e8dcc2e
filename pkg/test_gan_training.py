#!/usr/bin/env python3
"""
Tests for model assembly, the BCE losses and the alternating training step.
"""
import math

import pytest
import torch
from hypothesis import given, strategies as st

from core_utils import (
    VARIANT_CMHSA, VARIANT_DCGAN, VARIANT_ORDER, VARIANT_USE, VARIANT_USE_CMHSA,
    ConfigValidationError, NonFiniteError, ShapeError,
)
from dataset_manager import batch_iter, preload_split
from function.autodiff import gradient_check, make_generator
from gan_training import (
    PROB_EPS, ModelConfig, build_model, build_optimizers, count_blocks, d_loss, g_loss,
    generator_parameter_groups, make_latents, sample_images, train_step,
)

F64 = torch.float64


def _tiny(variant=VARIANT_USE_CMHSA, **overrides):
    params = dict(variant=variant, latent_dim=8, base_width=8, image_size=16)
    params.update(overrides)
    return ModelConfig(**params)


def _real_batch(n=4, size=16, seed=1):
    return torch.rand(n, 3, size, size, generator=make_generator(seed)) * 2 - 1


# === LOSSES ===
def test_losses_at_one_half():
    half = torch.full((5,), 0.5, dtype=F64)
    assert abs(d_loss(half, half).item() - 2 * math.log(2)) < 1e-12
    assert abs(g_loss(half).item() - math.log(2)) < 1e-12


def test_loss_breakdown():
    loss = d_loss(torch.tensor([0.8], dtype=F64), torch.tensor([0.4], dtype=F64))
    parts = loss.as_dict()
    assert parts["real_term"] == pytest.approx(-math.log(0.8), abs=1e-12)
    assert parts["fake_term"] == pytest.approx(-math.log(0.6), abs=1e-12)
    assert parts["total"] == pytest.approx(parts["real_term"] + parts["fake_term"], abs=1e-12)
    assert g_loss(torch.tensor([0.4], dtype=F64)).as_dict()["real_term"] is None


def test_saturated_probabilities_are_clamped():
    loss = d_loss(torch.zeros(3, dtype=F64), torch.ones(3, dtype=F64))
    assert math.isfinite(loss.item())
    assert loss.item() == pytest.approx(-2 * math.log(PROB_EPS), rel=1e-9)


def test_probabilities_outside_unit_interval_are_rejected():
    with pytest.raises(ValueError):
        g_loss(torch.tensor([1.5], dtype=F64))
    with pytest.raises(ValueError):
        d_loss(torch.tensor([-0.1], dtype=F64), torch.tensor([0.5], dtype=F64))


def test_nan_probabilities_raise_non_finite():
    with pytest.raises(NonFiniteError):
        g_loss(torch.tensor([float('nan')], dtype=F64))


@given(real=st.lists(st.floats(0.01, 0.99), min_size=1, max_size=6), seed=st.integers(0, 1000))
def test_d_loss_is_symmetric_under_role_swap(real, seed):
    """Swapping D(x) with 1 - D(G(z)) leaves L_D unchanged."""
    d_real = torch.tensor(real, dtype=F64)
    d_fake = torch.rand(len(real), generator=make_generator(seed), dtype=F64) * 0.98 + 0.01
    swapped = d_loss(1.0 - d_fake, 1.0 - d_real)
    assert swapped.item() == pytest.approx(d_loss(d_real, d_fake).item(), rel=1e-9)


def test_d_loss_of_a_mixed_batch_is_the_mean_of_sample_losses():
    d_real, d_fake = [0.9, 0.2, 0.55], [0.1, 0.6, 0.35]
    per_sample = [-math.log(r) - math.log(1 - f) for r, f in zip(d_real, d_fake)]
    loss = d_loss(torch.tensor(d_real, dtype=F64), torch.tensor(d_fake, dtype=F64))
    assert loss.item() == pytest.approx(sum(per_sample) / 3, abs=1e-12)


@pytest.mark.parametrize("eps", [1e-3, 1e-5, 1e-6])
def test_losses_vanish_for_a_confident_discriminator(eps):
    confident, unsure = torch.tensor([1.0 - eps], dtype=F64), torch.tensor([eps], dtype=F64)
    total = d_loss(confident, unsure).item() + g_loss(confident).item()
    assert 0 < total <= 4 * eps


# === CONFIG ===
def test_default_layout_at_64():
    cfg = ModelConfig(image_size=64)
    assert cfg.num_stages == 4
    assert cfg.resolved_use_stage == 2
    assert cfg.resolved_cmhsa_after == 1
    assert cfg.resolution_after(cfg.resolved_cmhsa_after) == 16
    assert cfg.width_after(-1) == 512
    assert cfg.width_after(3) == 3


def test_config_reports_every_problem():
    cfg = ModelConfig(variant="GAN-X", latent_dim=0, image_size=48, dropout=1.0, precision="half")
    problems = cfg.problems()
    assert len(problems) == 5
    with pytest.raises(ConfigValidationError) as info:
        cfg.validate()
    assert info.value.problems == problems


def test_heads_must_divide_attention_width():
    cfg = _tiny(num_heads=3)
    assert any("num_heads" in p for p in cfg.problems())
    assert not _tiny(VARIANT_USE, num_heads=3).problems()


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigValidationError):
        ModelConfig.from_dict({"variant": VARIANT_DCGAN, "depth": 3})


def test_digest_tracks_config():
    assert _tiny().digest() == _tiny().digest()
    assert len(_tiny().digest()) == 32
    assert _tiny().digest() != _tiny(VARIANT_DCGAN).digest()


# === MODELS ===
@pytest.mark.parametrize("variant", VARIANT_ORDER)
@pytest.mark.parametrize("size", [16, 32])
def test_output_shapes(variant, size):
    cfg = _tiny(variant, image_size=size)
    G, D = build_model(cfg)
    G.eval()
    z = make_latents(3, cfg.latent_dim, make_generator(0))
    images = G(z)
    assert images.shape == (3, 3, size, size)
    assert images.abs().max() < 1
    probs = D(images)
    assert probs.shape == (3,)
    assert torch.all((probs > 0) & (probs < 1))


@pytest.mark.parametrize("variant, expected", [
    (VARIANT_DCGAN, {"use": 0, "cmhsa": 0}),
    (VARIANT_USE, {"use": 1, "cmhsa": 0}),
    (VARIANT_CMHSA, {"use": 0, "cmhsa": 1}),
    (VARIANT_USE_CMHSA, {"use": 1, "cmhsa": 1}),
])
def test_block_counts(variant, expected):
    G, _ = build_model(_tiny(variant, image_size=32))
    assert count_blocks(G) == expected


def test_variants_differ_only_in_their_substitution():
    dcgan = generator_parameter_groups(build_model(_tiny(VARIANT_DCGAN, image_size=32))[0])
    use = generator_parameter_groups(build_model(_tiny(VARIANT_USE, image_size=32))[0])
    cmhsa = generator_parameter_groups(build_model(_tiny(VARIANT_CMHSA, image_size=32))[0])
    stage = _tiny(image_size=32).resolved_use_stage

    assert not dcgan["use"] and not dcgan["cmhsa"]
    assert use["use"] and not use["cmhsa"]
    assert set(dcgan["deconv"]) - set(use["deconv"]) == {f"blocks.{stage}.0.weight"}
    assert cmhsa["cmhsa"] and not cmhsa["use"]
    assert cmhsa["deconv"] == dcgan["deconv"]


def test_discriminator_is_shared_across_variants():
    shapes = {
        variant: [tuple(p.shape) for p in build_model(_tiny(variant))[1].parameters()]
        for variant in VARIANT_ORDER
    }
    assert len({tuple(s) for s in shapes.values()}) == 1


def test_build_model_is_deterministic():
    G1, D1 = build_model(_tiny(seed=3))
    G2, D2 = build_model(_tiny(seed=3))
    G3, _ = build_model(_tiny(seed=4))
    for a, b in ((G1, G2), (D1, D2)):
        for (name, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(x, y), name
    assert not torch.equal(G1.stem[0].weight, G3.stem[0].weight)


def test_weight_initialisation_statistics():
    G, _ = build_model(ModelConfig(variant=VARIANT_DCGAN, image_size=32))
    weight = G.stem[0].weight
    assert abs(weight.mean().item()) < 1e-3
    assert abs(weight.std().item() - 0.02) < 1e-3
    bn = G.stem[1]
    assert abs(bn.weight.mean().item() - 1.0) < 0.01
    assert torch.all(bn.bias == 0)


def test_float64_precision():
    G, D = build_model(_tiny(precision="float64"))
    assert all(p.dtype == F64 for p in G.parameters())
    assert all(p.dtype == F64 for p in D.parameters())


# === TRAINING ===
@pytest.mark.parametrize("variant", VARIANT_ORDER)
def test_train_step_updates_both_players(variant):
    G, D = build_model(_tiny(variant))
    opts = build_optimizers(G, D)
    g_before = [p.detach().clone() for p in G.parameters()]
    d_before = [p.detach().clone() for p in D.parameters()]
    loss_d, loss_g = train_step(G, D, _real_batch(), opts, make_generator(2))
    assert math.isfinite(loss_d.item()) and math.isfinite(loss_g.item())
    assert opts.step == 1
    assert any(not torch.equal(a, b) for a, b in zip(g_before, G.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(d_before, D.parameters()))


def test_train_step_is_reproducible():
    def run():
        G, D = build_model(_tiny())
        opts = build_optimizers(G, D)
        rng = make_generator(5)
        return [tuple(loss.item() for loss in train_step(G, D, _real_batch(seed=s), opts, rng)) for s in range(3)]

    assert run() == run()


def test_train_step_rejects_wrong_image_shape():
    G, D = build_model(_tiny())
    with pytest.raises(ShapeError):
        train_step(G, D, _real_batch(size=32), build_optimizers(G, D), make_generator(0))


def test_sample_images_is_eval_mode_and_restores_training():
    G, _ = build_model(_tiny())
    G.train()
    z = make_latents(5, 8, make_generator(1))
    a = sample_images(G, z, batch_size=2)
    b = sample_images(G, z)
    assert a.shape == (5, 3, 16, 16)
    assert torch.allclose(a, b, atol=1e-6)
    assert torch.equal(a, sample_images(G, z, batch_size=2))
    assert G.training


def test_zero_learning_rate_leaves_parameters_untouched():
    G, D = build_model(_tiny())
    opts = build_optimizers(G, D, lr=0.0)
    before = [p.detach().clone() for p in (*G.parameters(), *D.parameters())]
    for step in range(3):
        train_step(G, D, _real_batch(seed=step), opts, make_generator(step))
    assert all(torch.equal(a, b) for a, b in zip(before, (*G.parameters(), *D.parameters())))
    assert opts.step == 3


def test_samples_do_not_collapse_after_200_steps(tiny_faces):
    cfg = _tiny(VARIANT_USE_CMHSA)
    G, D = build_model(cfg)
    opts = build_optimizers(G, D)
    rng = make_generator(0)
    images = preload_split(tiny_faces, "train", 16)
    epoch = 0
    while opts.step < 200:
        for batch in batch_iter(tiny_faces, "train", 8, seed=0, epoch=epoch, images=images):
            if opts.step == 200:
                break
            train_step(G, D, batch.images, opts, rng)
        epoch += 1
    samples = sample_images(G, make_latents(16, cfg.latent_dim, make_generator(1)))
    assert samples.std().item() > 0.01


def test_dcgan_at_full_size():
    cfg = ModelConfig(variant=VARIANT_DCGAN)
    assert (cfg.latent_dim, cfg.image_size) == (100, 64)
    G, _ = build_model(cfg)
    images = sample_images(G, make_latents(2, 100, make_generator(0)))
    assert images.shape == (2, 3, 64, 64)
    assert torch.all((images > -1) & (images < 1))


@pytest.mark.parametrize("seed", range(5))
def test_generator_and_loss_gradients(seed):
    cfg = ModelConfig(variant=VARIANT_USE_CMHSA, latent_dim=4, base_width=2, image_size=16,
                      num_heads=2, dropout=0.0, seed=seed, precision="float64")
    G, D = build_model(cfg)
    z = make_latents(2, cfg.latent_dim, make_generator(100 + seed), F64)
    params = [G.stem[0].weight, G.blocks[0][0].conv1.weight, G.attention.w_q.weight, D.main[0].weight]

    def loss(*_):
        return g_loss(D(G(z))).total

    assert gradient_check(loss, params, h=1e-5, max_coords=8, generator=make_generator(seed)) < 1e-4
