"""
Inception Score and Frechet distance over a pluggable feature extractor.

The extractor is either a small fixed-seed classifier trained on the
synthetic dataset's hair-colour labels, or a set of precomputed activation
files. Reports always carry the extractor identity and digest so numbers
from different backbones are never compared by accident.
"""
import io
import logging
import os
import struct
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import rel_entr

from core_utils import (
    ConfigValidationError, ExtractorError, ShapeError, UnknownExtractorError,
    atomic_write_bytes, canonical_json, ensure_directories_exist, sha256_bytes,
)
from dataset_manager import ImageBatch
from function.autodiff import make_generator, split_generator
from gan_training import Generator, make_latents, sample_images

logger = logging.getLogger(__name__)

DEFAULT_SPLITS = 10
MIN_EVAL_SAMPLES = 64
PROB_TOLERANCE = 1e-6
SYMMETRY_TOLERANCE = 1e-9
# Batch std of generated pixels below this means the generator collapsed
MODE_COLLAPSE_FLOOR = 0.05
ACTIVATION_MAGIC = b"GANACTV1"
_ACTIVATION_HEADER = struct.Struct('<8sIII32s')

TOY_FEATURE_DIM = 32
TOY_EPOCHS = 6
TOY_BATCH = 64
TOY_LR = 1e-3
TOY_ARCH_VERSION = "toy-cnn-v1"


# === STATISTICS ===
@dataclass
class GaussianStats:
    mean: np.ndarray   # [D]
    cov: np.ndarray    # [D, D]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ShapeError(f"covariance shape {self.cov.shape} does not match mean dimension {d}")
        _check_symmetric(self.cov, "covariance")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _check_symmetric(m: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if not np.allclose(m, m.T, rtol=0.0, atol=SYMMETRY_TOLERANCE * scale):
        raise ValueError(f"{name} is not symmetric within {SYMMETRY_TOLERANCE}")


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased (N-1) covariance, symmetrised."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be [N, D], got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 feature rows, got {x.shape[0]}")
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return GaussianStats(mean=x.mean(axis=0), cov=(cov + cov.T) / 2.0)


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; negative eigenvalues from rounding are clamped to 0."""
    m = np.asarray(m, dtype=np.float64)
    _check_symmetric(m, "matrix")
    eigvals, eigvecs = scipy.linalg.eigh(m)
    root = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    return (root + root.T) / 2.0


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """
    ||mu_a - mu_b||^2 + Tr(S_a) + Tr(S_b) - 2 Tr((S_a^1/2 S_b S_a^1/2)^1/2).

    The symmetric inner product keeps every square root on a symmetric PSD
    matrix. Tiny negative results from rounding are reported as 0.
    """
    if a.dim != b.dim:
        raise ShapeError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = matrix_sqrt_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    inner_eigs = scipy.linalg.eigh((inner + inner.T) / 2.0, eigvals_only=True)
    trace_covmean = float(np.sqrt(np.clip(inner_eigs, 0.0, None)).sum())
    fid = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_covmean)
    if fid < -1e-8 * max(1.0, float(np.trace(a.cov) + np.trace(b.cov))):
        logger.warning("[Metrics] Frechet distance %.3e is negative beyond rounding", fid)
    return max(fid, 0.0)


def _check_distributions(probs: np.ndarray) -> None:
    if probs.ndim != 2 or probs.shape[1] < 1:
        raise ShapeError(f"class probabilities must be [N, K], got shape {probs.shape}")
    if not np.isfinite(probs).all() or (probs < 0).any():
        raise ValueError("class probabilities must be finite and non-negative")
    worst = float(np.abs(probs.sum(axis=1) - 1.0).max(initial=0.0))
    if worst > PROB_TOLERANCE:
        raise ValueError(f"class probability rows must sum to 1 (worst deviation {worst:.2e})")


def inception_score(probs, splits: int = DEFAULT_SPLITS) -> Tuple[float, float]:
    """
    exp(mean_x KL(p(y|x) || p(y))) per split; returns (mean, std) across splits.

    Each split holds N // splits rows and the last split absorbs the
    remainder. std is the population standard deviation.
    """
    p = np.asarray(probs, dtype=np.float64)
    _check_distributions(p)
    n = p.shape[0]
    if splits < 1:
        raise ValueError(f"splits must be positive, got {splits}")
    if n < splits:
        raise ValueError(f"{n} samples cannot fill {splits} splits")
    size = n // splits
    scores = []
    for i in range(splits):
        part = p[i * size:(n if i == splits - 1 else (i + 1) * size)]
        marginal = part.mean(axis=0, keepdims=True)
        scores.append(float(np.exp(rel_entr(part, marginal).sum(axis=1).mean())))
    return float(np.mean(scores)), float(np.std(scores))


# === EXTRACTORS ===
@dataclass
class ActivationSet:
    features: np.ndarray   # [N, D]
    probs: np.ndarray      # [N, K]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.probs.shape[0]:
            raise ShapeError(f"features {self.features.shape} and probabilities {self.probs.shape} disagree")
        _check_distributions(self.probs)

    def __len__(self) -> int:
        return self.features.shape[0]


class FeatureExtractor(ABC):
    """Class posteriors p(y|x) over K classes plus a D-dimensional embedding."""

    identity: str = "abstract"

    @property
    @abstractmethod
    def digest(self) -> str:
        """Hex SHA-256 identifying the extractor weights or activation source."""

    @property
    @abstractmethod
    def num_classes(self) -> int:
        ...

    @property
    @abstractmethod
    def feature_dim(self) -> int:
        ...

    @abstractmethod
    def activations(self, images: Optional[torch.Tensor], role: str) -> ActivationSet:
        """Features and probabilities for images ('real' or 'fake' role)."""


class ToyClassifier(nn.Module):
    """Two strided convs, global pooling, a feature layer and a class head."""

    def __init__(self, num_classes: int, feature_dim: int = TOY_FEATURE_DIM):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 16, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(32, feature_dim), nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, num_classes)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        features = self.body(x)
        return features, self.head(features)


def _init_toy(model: nn.Module, generator: torch.Generator) -> None:
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator,
                                           dtype=m.weight.dtype) * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()


def _state_digest(model: nn.Module) -> str:
    parts = []
    for name, tensor in sorted(model.state_dict().items()):
        parts.append(name.encode('utf-8'))
        parts.append(tensor.detach().cpu().numpy().astype('<f8').tobytes())
    return sha256_bytes(b"".join(parts))


class DefaultToyExtractor(FeatureExtractor):
    """
    Fixed-seed classifier trained on labelled images.

    Training is float64 on CPU with seeded init and shuffling, so the
    same training batch and seed always give the same weights (and digest).
    Weights may be cached in cache_dir keyed by the training data digest.
    """

    identity = TOY_ARCH_VERSION

    def __init__(self, model: ToyClassifier, image_size: int):
        self.model = model.eval()
        self.image_size = image_size
        self._digest = _state_digest(model)

    @classmethod
    def fit(cls, train: ImageBatch, seed: int = 0, epochs: int = TOY_EPOCHS,
            cache_dir: Optional[str] = None) -> "DefaultToyExtractor":
        if train.labels is None:
            raise ExtractorError("the toy extractor needs labelled training images")
        num_classes = int(train.labels.max().item()) + 1 if len(train) else 0
        if num_classes < 2:
            raise ExtractorError(f"the toy extractor needs at least 2 classes, got {num_classes}")
        image_size = train.images.shape[-1]
        images = train.images.to(torch.float64)
        model = ToyClassifier(num_classes).to(torch.float64)

        key = sha256_bytes(canonical_json({
            "arch": TOY_ARCH_VERSION, "seed": seed, "epochs": epochs, "size": image_size,
            "classes": num_classes,
            "data": sha256_bytes(images.numpy().tobytes() + train.labels.numpy().astype('<i8').tobytes()),
        }).encode('utf-8'))
        cache_path = os.path.join(cache_dir, f"toy_extractor_{key[:16]}.pt") if cache_dir else None
        if cache_path and os.path.exists(cache_path):
            with open(cache_path, 'rb') as f:
                model.load_state_dict(torch.load(io.BytesIO(f.read()), weights_only=True))
            logger.info("[Metrics] loaded cached toy extractor %s", cache_path)
            return cls(model, image_size)

        init_gen, shuffle_gen = split_generator(make_generator(seed), 2)
        _init_toy(model, init_gen)
        optimizer = torch.optim.Adam(model.parameters(), lr=TOY_LR)
        model.train()
        for epoch in range(epochs):
            order = torch.randperm(len(train), generator=shuffle_gen)
            total = 0.0
            for start in range(0, len(train), TOY_BATCH):
                index = order[start:start + TOY_BATCH]
                optimizer.zero_grad(set_to_none=True)
                _, logits = model(images[index])
                loss = F.cross_entropy(logits, train.labels[index])
                loss.backward()
                optimizer.step()
                total += float(loss.item()) * len(index)
            logger.debug("[Metrics] toy extractor epoch %d loss %.4f", epoch, total / len(train))

        if cache_path:
            ensure_directories_exist(cache_dir)
            buffer = io.BytesIO()
            torch.save(model.state_dict(), buffer)
            atomic_write_bytes(cache_path, buffer.getvalue())
        extractor = cls(model, image_size)
        logger.info("[Metrics] trained toy extractor on %d images (%d classes), digest %s",
                    len(train), num_classes, extractor.digest[:12])
        return extractor

    @property
    def digest(self) -> str:
        return self._digest

    @property
    def num_classes(self) -> int:
        return self.model.head.out_features

    @property
    def feature_dim(self) -> int:
        return self.model.head.in_features

    @torch.no_grad()
    def activations(self, images: Optional[torch.Tensor], role: str,
                    batch_size: int = 256) -> ActivationSet:
        if images is None:
            raise ExtractorError(f"the toy extractor needs images for role '{role}'")
        expected = (3, self.image_size, self.image_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ExtractorError(f"{role} images {tuple(images.shape)} do not match extractor input "
                                 f"[N, {expected[0]}, {expected[1]}, {expected[2]}]")
        features, probs = [], []
        for start in range(0, images.shape[0], batch_size):
            f, logits = self.model(images[start:start + batch_size].to(torch.float64))
            features.append(f)
            probs.append(torch.softmax(logits, dim=1))
        return ActivationSet(torch.cat(features).numpy(), torch.cat(probs).numpy())


def write_activation_file(path: str, activations: ActivationSet, digest: str) -> None:
    """Header (magic, D, K, count, 32-byte digest) then rows of D features + K probabilities as <f4."""
    digest_bytes = bytes.fromhex(digest)
    if len(digest_bytes) != 32:
        raise ExtractorError("activation digest must be 32 bytes")
    n, d = activations.features.shape
    k = activations.probs.shape[1]
    header = _ACTIVATION_HEADER.pack(ACTIVATION_MAGIC, d, k, n, digest_bytes)
    rows = np.concatenate([activations.features, activations.probs], axis=1).astype('<f4')
    atomic_write_bytes(path, header + rows.tobytes())


def read_activation_file(path: str) -> Tuple[ActivationSet, str]:
    """Returns the activations and the hex digest of the extractor that produced them."""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise ExtractorError(f"cannot read activation file {path}: {e}") from e
    if len(data) < _ACTIVATION_HEADER.size:
        raise ExtractorError(f"activation file {path} is truncated")
    magic, d, k, n, digest = _ACTIVATION_HEADER.unpack_from(data)
    if magic != ACTIVATION_MAGIC:
        raise ExtractorError(f"{path} is not an activation file")
    body = data[_ACTIVATION_HEADER.size:]
    if len(body) != n * (d + k) * 4:
        raise ExtractorError(f"activation file {path}: expected {n} rows of {d + k} floats, "
                             f"found {len(body)} bytes")
    rows = np.frombuffer(body, dtype='<f4').reshape(n, d + k).astype(np.float64)
    probs = rows[:, d:]
    # float32 storage perturbs row sums slightly
    probs = probs / probs.sum(axis=1, keepdims=True)
    try:
        return ActivationSet(rows[:, :d], probs), digest.hex()
    except ValueError as e:
        raise ExtractorError(f"activation file {path}: {e}") from e


class ExternalActivations(FeatureExtractor):
    """Precomputed activations, one file per role ('real', 'fake')."""

    identity = "external"

    def __init__(self, files: Dict[str, str]):
        if not files:
            raise ExtractorError("external activations need at least one file")
        self._sets: Dict[str, ActivationSet] = {}
        digests = set()
        for role, path in files.items():
            self._sets[role], digest = read_activation_file(path)
            digests.add(digest)
        if len(digests) != 1:
            raise ExtractorError("activation files come from different extractors")
        self._digest = digests.pop()
        shapes = {(s.features.shape[1], s.probs.shape[1]) for s in self._sets.values()}
        if len(shapes) != 1:
            raise ExtractorError(f"activation files disagree on dimensions: {sorted(shapes)}")
        self._dims = shapes.pop()

    @property
    def digest(self) -> str:
        return self._digest

    @property
    def num_classes(self) -> int:
        return self._dims[1]

    @property
    def feature_dim(self) -> int:
        return self._dims[0]

    def activations(self, images: Optional[torch.Tensor], role: str) -> ActivationSet:
        if role not in self._sets:
            raise ExtractorError(f"no activation file for role '{role}' (have {', '.join(sorted(self._sets))})")
        act = self._sets[role]
        if images is not None and images.shape[0] != len(act):
            raise ExtractorError(f"{role}: {images.shape[0]} images but {len(act)} precomputed rows")
        return act


AVAILABLE_EXTRACTORS = ("toy", "external")


def build_extractor(extractor_id: str, train: Optional[ImageBatch] = None, seed: int = 0,
                    cache_dir: Optional[str] = None,
                    activation_files: Optional[Dict[str, str]] = None) -> FeatureExtractor:
    if extractor_id == "toy":
        if train is None:
            raise ExtractorError("the toy extractor needs the labelled training split")
        return DefaultToyExtractor.fit(train, seed=seed, cache_dir=cache_dir)
    if extractor_id == "external":
        return ExternalActivations(activation_files or {})
    raise UnknownExtractorError(extractor_id, AVAILABLE_EXTRACTORS)


# === REPORT ===
@dataclass
class MetricReport:
    fid: float
    is_mean: float
    is_std: float
    n_fake: int
    n_real: int
    splits: int
    extractor: str
    extractor_digest: str
    seed: int
    fake_pixel_std: float
    noise_floor: Optional[float] = None

    @property
    def mode_collapsed(self) -> bool:
        return self.fake_pixel_std < MODE_COLLAPSE_FLOOR

    def to_dict(self) -> Dict[str, Union[float, int, str]]:
        return asdict(self)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def format_text(self) -> str:
        return (f"FID {self.fid:.4f} | IS {self.is_mean:.4f} ± {self.is_std:.4f} "
                f"| {self.n_fake} fake / {self.n_real} real | {self.extractor} ({self.extractor_digest[:12]})")


def _as_images(images: Union[ImageBatch, torch.Tensor, None]) -> Optional[torch.Tensor]:
    return images.images if isinstance(images, ImageBatch) else images


def pixel_std(images: torch.Tensor) -> float:
    """Per-pixel std across the batch, averaged; near 0 when every sample is the same."""
    return float(images.to(torch.float64).std(dim=0).mean().item())


def evaluate(G: Generator, real_images: Union[ImageBatch, torch.Tensor, None],
             extractor: FeatureExtractor, n_samples: int = 256, seed: int = 0,
             splits: int = DEFAULT_SPLITS) -> MetricReport:
    """FID (real vs fake features) and IS (fake posteriors) for n_samples eval-mode fakes."""
    if n_samples < MIN_EVAL_SAMPLES:
        raise ConfigValidationError([f"n_samples must be >= {MIN_EVAL_SAMPLES}, got {n_samples}"])
    latents = make_latents(n_samples, G.cfg.latent_dim, make_generator(seed), G.cfg.dtype)
    fakes = sample_images(G, latents)
    real = _as_images(real_images)
    if real is not None and tuple(real.shape[1:]) != tuple(fakes.shape[1:]):
        raise ExtractorError(f"real images {tuple(real.shape[1:])} and generated images "
                             f"{tuple(fakes.shape[1:])} differ in shape")
    fake_act = extractor.activations(fakes, "fake")
    real_act = extractor.activations(real, "real")
    fid = frechet_distance(gaussian_stats(real_act.features), gaussian_stats(fake_act.features))
    is_mean, is_std = inception_score(fake_act.probs, splits=min(splits, len(fake_act)))
    report = MetricReport(
        fid=fid, is_mean=is_mean, is_std=is_std,
        n_fake=len(fake_act), n_real=len(real_act), splits=min(splits, len(fake_act)),
        extractor=extractor.identity, extractor_digest=extractor.digest, seed=seed,
        fake_pixel_std=pixel_std(fakes),
    )
    logger.info("[Metrics] %s", report.format_text())
    return report


def real_noise_floor(real_images: Union[ImageBatch, torch.Tensor], extractor: FeatureExtractor,
                     seed: int = 0) -> float:
    """FID between two disjoint, seeded halves of the real set."""
    images = _as_images(real_images)
    if images is None or images.shape[0] < 4:
        raise ValueError("the noise floor needs at least 4 real images")
    order = torch.randperm(images.shape[0], generator=make_generator(seed))
    half = images.shape[0] // 2
    a = extractor.activations(images[order[:half]], "real")
    b = extractor.activations(images[order[half:2 * half]], "real")
    return frechet_distance(gaussian_stats(a.features), gaussian_stats(b.features))


__all__ = [
    'GaussianStats', 'gaussian_stats', 'matrix_sqrt_psd', 'frechet_distance', 'inception_score',
    'ActivationSet', 'FeatureExtractor', 'ToyClassifier', 'DefaultToyExtractor', 'ExternalActivations',
    'write_activation_file', 'read_activation_file', 'AVAILABLE_EXTRACTORS', 'build_extractor',
    'MetricReport', 'evaluate', 'real_noise_floor', 'pixel_std', 'MODE_COLLAPSE_FLOOR',
]
