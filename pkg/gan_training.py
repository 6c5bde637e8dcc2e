# -*- coding: utf-8 -*-
"""
Model assembly, adversarial losses and the alternating training step.

The four ablation variants share one DCGAN ladder; USE-GAN swaps one inner
DeConv block for a USE block, CMHSA-GAN inserts a CMHSA block between two
DeConv blocks, USE-CMHSA-GAN does both. The discriminator never changes.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from core_utils import (
    VARIANT_CMHSA, VARIANT_DCGAN, VARIANT_ORDER, VARIANT_USE, VARIANT_USE_CMHSA,
    ConfigValidationError, NonFiniteError, ShapeError, canonical_json, sha256_bytes,
)
from function.autodiff import Tensor, make_generator
from function.cmhsa_layer import MAX_POSITIONS, CmhsaBlock
from function.use_layer import UseBlock

logger = logging.getLogger(__name__)

# Probabilities are clamped this far from 0 and 1 before taking logs
PROB_EPS = 1e-7
INIT_STD = 0.02
LEAKY_SLOPE = 0.2
DEFAULT_LR = 2e-4
DEFAULT_BETAS = (0.5, 0.999)

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}

_VARIANT_FLAGS = {
    VARIANT_DCGAN: (False, False),
    VARIANT_USE: (True, False),
    VARIANT_CMHSA: (False, True),
    VARIANT_USE_CMHSA: (True, True),
}


# === CONFIGURATION ===
@dataclass
class ModelConfig:
    """Variant selector plus layer hyperparameters."""
    variant: str = VARIANT_USE_CMHSA
    latent_dim: int = 100
    base_width: int = 64
    image_channels: int = 3
    image_size: int = 64
    num_heads: int = 4
    dropout: float = 0.1
    seed: int = 0
    use_stage: Optional[int] = None
    cmhsa_after: Optional[int] = None
    precision: str = "float32"

    # --- derived layout ---
    @property
    def has_use(self) -> bool:
        return _VARIANT_FLAGS[self.variant][0]

    @property
    def has_cmhsa(self) -> bool:
        return _VARIANT_FLAGS[self.variant][1]

    @property
    def num_stages(self) -> int:
        """Number of 2x upsampling blocks from the 4x4 stem to the image."""
        return int(round(math.log2(self.image_size // 4)))

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    @property
    def resolved_use_stage(self) -> int:
        return self.num_stages - 2 if self.use_stage is None else self.use_stage

    @property
    def resolved_cmhsa_after(self) -> int:
        return self.resolved_use_stage - 1 if self.cmhsa_after is None else self.cmhsa_after

    def width_after(self, stage: int) -> int:
        """Channel width after block `stage` (-1 is the projection stem)."""
        if stage == self.num_stages - 1:
            return self.image_channels
        return self.base_width * 2 ** (self.num_stages - 2 - stage)

    def resolution_after(self, stage: int) -> int:
        return 4 * 2 ** (stage + 1)

    # --- validation ---
    def problems(self) -> List[str]:
        problems = []
        if self.variant not in _VARIANT_FLAGS:
            problems.append(f"variant '{self.variant}' is not one of {', '.join(VARIANT_ORDER)}")
        for name in ('latent_dim', 'base_width', 'image_channels', 'num_heads'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                problems.append(f"{name} must be a positive integer, got {value!r}")
        size = self.image_size
        if not isinstance(size, int) or size < 16 or size & (size - 1):
            problems.append(f"image_size must be a power of two >= 16, got {size!r}")
        if not isinstance(self.dropout, (int, float)) or not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must be in [0, 1), got {self.dropout!r}")
        if self.precision not in PRECISIONS:
            problems.append(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if problems or self.variant not in _VARIANT_FLAGS:
            return problems

        n = self.num_stages
        if self.has_use:
            stage = self.resolved_use_stage
            if not 0 <= stage <= n - 2:
                problems.append(f"use_stage must be in [0, {n - 2}], got {stage}")
            elif self.width_after(stage - 1) % 2:
                problems.append(f"USE block input width {self.width_after(stage - 1)} must be even")
        if self.has_cmhsa:
            after = self.resolved_cmhsa_after
            if not -1 <= after <= n - 2:
                problems.append(f"cmhsa_after must be in [-1, {n - 2}], got {after}")
            else:
                width = self.width_after(after)
                if width % self.num_heads:
                    problems.append(f"CMHSA width {width} is not divisible by num_heads {self.num_heads}")
                if self.resolution_after(after) ** 2 > MAX_POSITIONS:
                    problems.append(f"CMHSA at {self.resolution_after(after)}x{self.resolution_after(after)} "
                                    f"exceeds {MAX_POSITIONS} positions")
        return problems

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigValidationError(problems)
        return self

    # --- serialization ---
    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigValidationError([f"unknown model key '{k}'" for k in unknown])
        return cls(**payload)

    def digest(self) -> bytes:
        """32-byte SHA-256 of the canonical config."""
        return bytes.fromhex(sha256_bytes(canonical_json(self.to_dict()).encode('utf-8')))


# === MODELS ===
class Generator(nn.Module):
    """Latent [N, z] -> image [N, C, S, S] in (-1, 1)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.num_stages
        self.stem = nn.Sequential(
            nn.ConvTranspose2d(cfg.latent_dim, cfg.width_after(-1), 4, 1, 0, bias=False),
            nn.BatchNorm2d(cfg.width_after(-1)),
            nn.ReLU(),
        )
        self.blocks = nn.ModuleList()
        for stage in range(n):
            c_in, c_out = cfg.width_after(stage - 1), cfg.width_after(stage)
            if cfg.has_use and stage == cfg.resolved_use_stage:
                upsample = UseBlock(c_in, c_out)
            else:
                upsample = nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=False)
            if stage == n - 1:
                self.blocks.append(nn.Sequential(upsample, nn.Tanh()))
            else:
                self.blocks.append(nn.Sequential(upsample, nn.BatchNorm2d(c_out), nn.ReLU()))
        self.attention_after = cfg.resolved_cmhsa_after if cfg.has_cmhsa else None
        self.attention = None
        if cfg.has_cmhsa:
            self.attention = CmhsaBlock(cfg.width_after(self.attention_after), cfg.num_heads, cfg.dropout)

    def forward(self, z: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
        if z.dim() != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ShapeError(f"latent must be [N, {self.cfg.latent_dim}], got {tuple(z.shape)}")
        x = self.stem(z.view(z.shape[0], -1, 1, 1))
        if self.attention_after == -1:
            x = self.attention(x, generator)
        for stage, block in enumerate(self.blocks):
            x = block(x)
            if self.attention_after == stage:
                x = self.attention(x, generator)
        return x


class Discriminator(nn.Module):
    """Image [N, C, S, S] -> per-sample probability [N]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        width = cfg.base_width
        layers = [nn.Conv2d(cfg.image_channels, width, 4, 2, 1, bias=False), nn.LeakyReLU(LEAKY_SLOPE)]
        for _ in range(cfg.num_stages - 1):
            layers += [nn.Conv2d(width, width * 2, 4, 2, 1, bias=False),
                       nn.BatchNorm2d(width * 2), nn.LeakyReLU(LEAKY_SLOPE)]
            width *= 2
        layers += [nn.Conv2d(width, 1, 4, 1, 0, bias=False), nn.Sigmoid()]
        self.main = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        expected = (self.cfg.image_channels, self.cfg.image_size, self.cfg.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"discriminator expects [N, {expected[0]}, {expected[1]}, {expected[2]}], "
                             f"got {tuple(x.shape)}")
        return self.main(x).view(-1)


def weights_init(module: nn.Module, generator: torch.Generator) -> None:
    """normal(0, 0.02) conv weights, normal(1, 0.02) batchnorm scales, zero biases."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator, dtype=m.weight.dtype) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=generator,
                                                 dtype=m.weight.dtype) * INIT_STD)
                m.bias.zero_()


def build_model(cfg: ModelConfig) -> Tuple[Generator, Discriminator]:
    """Deterministic construction from cfg.seed."""
    cfg.validate()
    gen = make_generator(cfg.seed)
    G = Generator(cfg).to(cfg.dtype)
    D = Discriminator(cfg).to(cfg.dtype)
    weights_init(G, gen)
    weights_init(D, gen)
    logger.debug("[Model] built %s (%d generator parameters)", cfg.variant,
                 sum(p.numel() for p in G.parameters()))
    return G, D


def count_blocks(G: Generator) -> Dict[str, int]:
    """Number of USE and CMHSA blocks inside a generator."""
    modules = list(G.modules())
    return {
        "use": sum(isinstance(m, UseBlock) for m in modules),
        "cmhsa": sum(isinstance(m, CmhsaBlock) for m in modules),
    }


def generator_parameter_groups(G: Generator) -> Dict[str, List[str]]:
    """Parameter names grouped by the kind of block that owns them."""
    groups: Dict[str, List[str]] = {"deconv": [], "use": [], "cmhsa": []}
    owners = {}
    for name, module in G.named_modules():
        if isinstance(module, UseBlock):
            owners[name] = "use"
        elif isinstance(module, CmhsaBlock):
            owners[name] = "cmhsa"
    for name, _ in G.named_parameters():
        kind = next((k for prefix, k in owners.items() if name.startswith(prefix + ".")), "deconv")
        groups[kind].append(name)
    return groups


# === LOSSES ===
@dataclass
class LossValue:
    """Scalar loss with its per-term breakdown."""
    total: Tensor
    fake_term: Tensor
    real_term: Optional[Tensor] = None

    def item(self) -> float:
        return float(self.total.item())

    def detached(self) -> "LossValue":
        return LossValue(self.total.detach(), self.fake_term.detach(),
                         None if self.real_term is None else self.real_term.detach())

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {
            "total": self.item(),
            "real_term": None if self.real_term is None else float(self.real_term.item()),
            "fake_term": float(self.fake_term.item()),
        }


def _clamped_probs(p: Tensor, name: str) -> Tensor:
    if not torch.isfinite(p).all():
        raise NonFiniteError(f"{name} contains non-finite probabilities")
    if (p < 0).any() or (p > 1).any():
        raise ValueError(f"{name} has probabilities outside [0, 1]")
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def d_loss(d_real: Tensor, d_fake: Tensor) -> LossValue:
    """L_D = -mean(log D(x)) - mean(log(1 - D(G(z))))."""
    real_term = -torch.log(_clamped_probs(d_real, "d_real")).mean()
    fake_term = -torch.log(1.0 - _clamped_probs(d_fake, "d_fake")).mean()
    return LossValue(total=real_term + fake_term, fake_term=fake_term, real_term=real_term)


def g_loss(d_fake: Tensor) -> LossValue:
    """L_G = -mean(log D(G(z))), the non-saturating generator loss."""
    fake_term = -torch.log(_clamped_probs(d_fake, "d_fake")).mean()
    return LossValue(total=fake_term, fake_term=fake_term)


# === OPTIMIZATION ===
@dataclass
class TrainerOptimizers:
    """Adam states for both players."""
    d: torch.optim.Adam
    g: torch.optim.Adam
    step: int = field(default=0)


def build_optimizers(G: Generator, D: Discriminator, lr: float = DEFAULT_LR,
                     betas: Tuple[float, float] = DEFAULT_BETAS) -> TrainerOptimizers:
    return TrainerOptimizers(
        d=torch.optim.Adam(D.parameters(), lr=lr, betas=tuple(betas)),
        g=torch.optim.Adam(G.parameters(), lr=lr, betas=tuple(betas)),
    )


def make_latents(n: int, latent_dim: int, generator: torch.Generator,
                 dtype: torch.dtype = torch.float32) -> Tensor:
    return torch.randn(n, latent_dim, generator=generator, dtype=dtype)


def _ensure_finite(loss: LossValue, player: str, diagnostics: Dict[str, Any]) -> None:
    if not torch.isfinite(loss.total):
        details = dict(diagnostics, **{f"{player}_{k}": v for k, v in loss.as_dict().items()})
        raise NonFiniteError(f"non-finite {player} loss", details)


def train_step(G: Generator, D: Discriminator, real_batch: Tensor,
               opt_states: TrainerOptimizers, rng: torch.Generator) -> Tuple[LossValue, LossValue]:
    """One discriminator update on (real, detached fake), then one generator update."""
    cfg = G.cfg
    expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
    if real_batch.dim() != 4 or tuple(real_batch.shape[1:]) != expected:
        raise ShapeError(f"real batch shape {tuple(real_batch.shape)} does not match image shape {expected}")
    G.train()
    D.train()
    real = real_batch.to(cfg.dtype)
    z = make_latents(real.shape[0], cfg.latent_dim, rng, cfg.dtype)
    diagnostics = {"step": opt_states.step, "batch": real.shape[0]}

    # Discriminator: push D(x) -> 1, D(G(z)) -> 0
    opt_states.d.zero_grad(set_to_none=True)
    fake = G(z, generator=rng)
    loss_d = d_loss(D(real), D(fake.detach()))
    _ensure_finite(loss_d, "discriminator", diagnostics)
    loss_d.total.backward()
    opt_states.d.step()

    # Generator: push D(G(z)) -> 1
    opt_states.g.zero_grad(set_to_none=True)
    loss_g = g_loss(D(fake))
    _ensure_finite(loss_g, "generator", diagnostics)
    loss_g.total.backward()
    opt_states.g.step()

    opt_states.step += 1
    return loss_d.detached(), loss_g.detached()


@torch.no_grad()
def sample_images(G: Generator, latents: Tensor, batch_size: int = 256) -> Tensor:
    """Eval-mode generation (CMHSA dropout off, batchnorm running stats)."""
    was_training = G.training
    G.eval()
    try:
        chunks = [G(latents[i:i + batch_size].to(G.cfg.dtype)) for i in range(0, latents.shape[0], batch_size)]
    finally:
        G.train(was_training)
    return torch.cat(chunks, dim=0)
