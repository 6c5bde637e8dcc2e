#!/usr/bin/env python3
"""
Tests for FID / IS arithmetic against closed forms and independent oracles,
the activation file format and the extractor plumbing.
"""
import math

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, strategies as st

from core_utils import (
    VARIANT_DCGAN, ConfigValidationError, ExtractorError, ShapeError, UnknownExtractorError,
)
from dataset_manager import SyntheticFaceSpec, generate_synthetic_dataset, preload_split
from gan_training import ModelConfig, build_model
from metric_evaluator import (
    AVAILABLE_EXTRACTORS, ActivationSet, DefaultToyExtractor, ExternalActivations, GaussianStats,
    MetricReport, build_extractor, evaluate, frechet_distance, gaussian_stats, inception_score,
    matrix_sqrt_psd, read_activation_file, real_noise_floor, write_activation_file,
)


def _random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + d * np.eye(d)


def _fid_oracle(a: GaussianStats, b: GaussianStats) -> float:
    """Non-symmetric form through a general matrix square root."""
    covmean = scipy.linalg.sqrtm(a.cov @ b.cov)
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * np.trace(covmean).real)


def _is_oracle(probs, splits):
    n, k = len(probs), len(probs[0])
    size = n // splits
    scores = []
    for s in range(splits):
        rows = probs[s * size:(n if s == splits - 1 else (s + 1) * size)]
        marginal = [sum(r[j] for r in rows) / len(rows) for j in range(k)]
        kl = 0.0
        for r in rows:
            kl += sum(r[j] * math.log(r[j] / marginal[j]) for j in range(k) if r[j] > 0)
        scores.append(math.exp(kl / len(rows)))
    mean = sum(scores) / splits
    return mean, math.sqrt(sum((x - mean) ** 2 for x in scores) / splits)


# === FRECHET DISTANCE ===
def test_fid_of_identical_stats_is_zero():
    stats = GaussianStats(np.arange(4.0), _random_spd(np.random.default_rng(0), 4))
    assert frechet_distance(stats, stats) < 1e-8


def test_fid_mean_shift():
    a = GaussianStats(np.zeros(2), np.eye(2))
    b = GaussianStats(np.array([3.0, 4.0]), np.eye(2))
    assert frechet_distance(a, b) == pytest.approx(25.0, abs=1e-8)


def test_fid_scalar_case():
    # (sqrt(4) - sqrt(1))^2 = 1
    fid = frechet_distance(GaussianStats([0.0], [[1.0]]), GaussianStats([0.0], [[4.0]]))
    assert fid == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_fid_matches_independent_oracle(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 9))
    a = GaussianStats(rng.standard_normal(d), _random_spd(rng, d))
    b = GaussianStats(rng.standard_normal(d), _random_spd(rng, d))
    assert frechet_distance(a, b) == pytest.approx(_fid_oracle(a, b), abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_fid_is_symmetric(seed):
    rng = np.random.default_rng(100 + seed)
    a = GaussianStats(rng.standard_normal(6), _random_spd(rng, 6))
    b = GaussianStats(rng.standard_normal(6), _random_spd(rng, 6))
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8


def test_fid_with_equal_covariances_is_mean_distance():
    rng = np.random.default_rng(7)
    cov = _random_spd(rng, 5)
    mu_a, mu_b = rng.standard_normal(5), rng.standard_normal(5)
    fid = frechet_distance(GaussianStats(mu_a, cov), GaussianStats(mu_b, cov))
    assert fid == pytest.approx(float((mu_a - mu_b) @ (mu_a - mu_b)), abs=1e-8)


def test_fid_rejects_dimension_mismatch():
    with pytest.raises(ShapeError):
        frechet_distance(GaussianStats(np.zeros(2), np.eye(2)), GaussianStats(np.zeros(3), np.eye(3)))


def test_stats_reject_asymmetric_covariance():
    with pytest.raises(ValueError):
        GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


@pytest.mark.parametrize("seed", range(5))
def test_matrix_sqrt_reconstructs(seed):
    m = _random_spd(np.random.default_rng(seed), 6)
    root = matrix_sqrt_psd(m)
    assert np.linalg.norm(root @ root - m) / np.linalg.norm(m) < 1e-8


def test_matrix_sqrt_clamps_rounding_negatives():
    m = np.array([[1.0, 1.0], [1.0, 1.0]]) - np.eye(2) * 1e-15
    assert np.isfinite(matrix_sqrt_psd(m)).all()


# === GAUSSIAN STATS ===
def test_identical_rows_have_zero_covariance():
    stats = gaussian_stats(np.tile([1.0, 2.0, 3.0], (5, 1)))
    assert np.array_equal(stats.mean, [1.0, 2.0, 3.0])
    assert np.allclose(stats.cov, 0.0, atol=1e-15)


def test_two_point_covariance_uses_n_minus_one():
    stats = gaussian_stats([[0.0, 0.0], [2.0, 0.0]])
    assert np.allclose(stats.mean, [1.0, 0.0])
    assert np.allclose(stats.cov, [[2.0, 0.0], [0.0, 0.0]])


def test_sampled_covariance_converges():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((20000, 3)) * np.array([1.0, 2.0, 3.0])
    stats = gaussian_stats(x)
    assert np.allclose(stats.cov, np.diag([1.0, 4.0, 9.0]), rtol=0.05, atol=0.05)


def test_single_row_is_rejected():
    with pytest.raises(ValueError):
        gaussian_stats(np.zeros((1, 3)))


# === INCEPTION SCORE ===
def test_uniform_posteriors_score_one():
    mean, std = inception_score(np.full((20, 5), 0.2), splits=4)
    assert mean == pytest.approx(1.0, abs=1e-9)
    assert std == pytest.approx(0.0, abs=1e-9)


def test_one_hot_posteriors_score_k():
    mean, _ = inception_score(np.eye(10), splits=1)
    assert mean == pytest.approx(10.0, abs=1e-9)


@pytest.mark.parametrize("n, k, splits", [(30, 4, 1), (30, 4, 3), (47, 6, 5), (12, 3, 12)])
def test_inception_score_matches_double_loop(n, k, splits):
    probs = np.random.default_rng(n * k).dirichlet(np.ones(k), size=n)
    mean, std = inception_score(probs, splits=splits)
    expected_mean, expected_std = _is_oracle(probs.tolist(), splits)
    assert mean == pytest.approx(expected_mean, abs=1e-9)
    assert std == pytest.approx(expected_std, abs=1e-9)


@given(seed=st.integers(0, 2 ** 16), n=st.integers(2, 60), k=st.integers(1, 8), alpha=st.floats(0.2, 5.0))
def test_inception_score_is_bounded(seed, n, k, alpha):
    probs = np.random.default_rng(seed).dirichlet(np.full(k, alpha), size=n)
    probs = np.clip(probs, 0.0, None)
    probs /= probs.sum(axis=1, keepdims=True)
    mean, _ = inception_score(probs, splits=1)
    assert 1.0 - 1e-9 <= mean <= k + 1e-9


def test_inception_score_rejects_bad_rows():
    with pytest.raises(ValueError):
        inception_score(np.array([[0.5, 0.6], [0.5, 0.5]]), splits=1)
    with pytest.raises(ValueError):
        inception_score(np.array([[1.5, -0.5]]), splits=1)


def test_inception_score_needs_a_row_per_split():
    with pytest.raises(ValueError):
        inception_score(np.eye(4), splits=5)


# === ACTIVATION FILES ===
def _activation_set(seed, n=12, d=5, k=3):
    rng = np.random.default_rng(seed)
    return ActivationSet(rng.standard_normal((n, d)), rng.dirichlet(np.ones(k), size=n))


def test_activation_file_round_trip(tmp_path):
    act = _activation_set(0)
    digest = "ab" * 32
    path = str(tmp_path / "real.act")
    write_activation_file(path, act, digest)
    loaded, loaded_digest = read_activation_file(path)
    assert loaded_digest == digest
    assert np.allclose(loaded.features, act.features, atol=1e-6)
    assert np.allclose(loaded.probs.sum(axis=1), 1.0, atol=1e-12)


def test_truncated_activation_file(tmp_path):
    path = tmp_path / "bad.act"
    write_activation_file(str(path), _activation_set(1), "00" * 32)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ExtractorError):
        read_activation_file(str(path))


def test_external_activations_feed_evaluate(tmp_path):
    real, fake = str(tmp_path / "real.act"), str(tmp_path / "fake.act")
    write_activation_file(real, _activation_set(2, n=80), "cd" * 32)
    write_activation_file(fake, _activation_set(3, n=64), "cd" * 32)
    extractor = build_extractor("external", activation_files={"real": real, "fake": fake})
    assert extractor.digest == "cd" * 32
    assert (extractor.feature_dim, extractor.num_classes) == (5, 3)

    G, _ = build_model(ModelConfig(variant=VARIANT_DCGAN, latent_dim=8, base_width=8, image_size=16))
    report = evaluate(G, None, extractor, n_samples=64, splits=4)
    assert report.n_fake == 64 and report.n_real == 80
    assert report.extractor == "external"

    with pytest.raises(ExtractorError):
        evaluate(G, None, extractor, n_samples=72)


def test_external_activations_must_share_a_digest(tmp_path):
    real, fake = str(tmp_path / "real.act"), str(tmp_path / "fake.act")
    write_activation_file(real, _activation_set(2), "cd" * 32)
    write_activation_file(fake, _activation_set(3), "ef" * 32)
    with pytest.raises(ExtractorError):
        ExternalActivations({"real": real, "fake": fake})


def test_unknown_extractor_lists_available_ones():
    with pytest.raises(UnknownExtractorError) as info:
        build_extractor("inception-v3")
    message = str(info.value)
    assert "inception-v3" in message
    for name in AVAILABLE_EXTRACTORS:
        assert name in message


# === TOY EXTRACTOR / EVALUATE ===
@pytest.fixture(scope="module")
def faces(tmp_path_factory):
    root = tmp_path_factory.mktemp("metric_faces")
    dataset = generate_synthetic_dataset(SyntheticFaceSpec(seed=11, image_size=16), 200, str(root))
    return preload_split(dataset, "train", 16)


@pytest.fixture(scope="module")
def toy(faces):
    return DefaultToyExtractor.fit(faces, seed=0)


def test_toy_extractor_is_deterministic(faces, toy):
    again = DefaultToyExtractor.fit(faces, seed=0)
    assert again.digest == toy.digest
    act = toy.activations(faces.images[:10], "real")
    assert act.features.shape == (10, toy.feature_dim)
    assert np.allclose(act.probs.sum(axis=1), 1.0)


def test_toy_extractor_cache(faces, toy, tmp_path):
    first = DefaultToyExtractor.fit(faces, seed=0, cache_dir=str(tmp_path))
    assert len(list(tmp_path.glob("toy_extractor_*.pt"))) == 1
    second = DefaultToyExtractor.fit(faces, seed=0, cache_dir=str(tmp_path))
    assert first.digest == second.digest == toy.digest


def test_toy_extractor_rejects_other_image_sizes(toy):
    with pytest.raises(ExtractorError):
        toy.activations(torch.zeros(2, 3, 32, 32), "fake")


def test_evaluate_is_deterministic(faces, toy):
    G, _ = build_model(ModelConfig(latent_dim=8, base_width=8, image_size=16))
    a = evaluate(G, faces, toy, n_samples=64, seed=3, splits=4)
    b = evaluate(G, faces, toy, n_samples=64, seed=3, splits=4)
    assert a == b
    assert isinstance(a, MetricReport)
    assert a.fid >= 0
    assert 1.0 - 1e-9 <= a.is_mean <= toy.num_classes + 1e-9
    assert a.n_real == len(faces)
    assert a.extractor_digest == toy.digest


def test_evaluate_needs_enough_samples(faces, toy):
    G, _ = build_model(ModelConfig(latent_dim=8, base_width=8, image_size=16))
    with pytest.raises(ConfigValidationError):
        evaluate(G, faces, toy, n_samples=32)


def test_untrained_generator_is_above_the_noise_floor(faces, toy):
    G, _ = build_model(ModelConfig(latent_dim=8, base_width=8, image_size=16))
    floor = real_noise_floor(faces, toy, seed=0)
    report = evaluate(G, faces, toy, n_samples=128, seed=0)
    assert report.fid > floor
