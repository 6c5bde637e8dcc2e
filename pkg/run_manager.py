# -*- coding: utf-8 -*-
"""
Run orchestration: YAML run configs, the training loop with resumable
checkpoints, sampling, evaluation and the four-variant ablation.

Run directory layout:
    config.yaml  loss_log.txt  train.log  metrics.json
    checkpoints/latest.ckpt  samples/step_XXXXXX.png
"""
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
import torch
import yaml
from torchvision.utils import save_image
from tqdm import tqdm

from checkpoint_manager import checkpoint_load, checkpoint_save, read_checkpoint
from core_utils import (
    VARIANT_DCGAN, VARIANT_ORDER, VARIANT_USE_CMHSA, Config, ConfigValidationError, DatasetError,
    NonFiniteError, SafeErrorLogger, UnknownExtractorError, atomic_write_text, canonical_json,
    ensure_directories_exist, setup_logging, sha256_bytes,
)
from dataset_manager import DECODE_WORKERS, SPLITS, batch_iter, load_manifest, preload_split
from function.autodiff import make_generator, split_generator
from gan_training import (
    Generator, ModelConfig, build_model, build_optimizers, make_latents, sample_images, train_step,
)
from metric_evaluator import (
    AVAILABLE_EXTRACTORS, MIN_EVAL_SAMPLES, MetricReport, build_extractor, evaluate, real_noise_floor,
)

logger = logging.getLogger(__name__)
error_logger = SafeErrorLogger(__name__)

CONFIG_NAME = "config.yaml"
LOSS_LOG_NAME = "loss_log.txt"
TRAIN_LOG_NAME = "train.log"
METRICS_NAME = "metrics.json"
CHECKPOINT_NAME = "latest.ckpt"

# Published full-scale numbers (Inception-v3 backbone, real anime faces); context only
REFERENCE_ROWS = {VARIANT_USE_CMHSA: (53.74, 2.85), VARIANT_DCGAN: (63.92, None)}


# === RUN CONFIG ===
@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    sample_every: int = 100
    checkpoint_every: int = 100
    sample_count: int = 64
    log_every: int = 50

    def problems(self) -> List[str]:
        problems = []
        for name in ('steps', 'batch_size', 'sample_every', 'checkpoint_every', 'sample_count', 'log_every'):
            if getattr(self, name) < 1:
                problems.append(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            problems.append(f"train.lr must be positive, got {self.lr}")
        for name in ('beta1', 'beta2'):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"train.{name} must be in [0, 1), got {getattr(self, name)}")
        return problems


@dataclass
class DataSettings:
    manifest: str = ""
    split: str = "train"
    workers: int = DECODE_WORKERS

    def problems(self) -> List[str]:
        problems = []
        if not self.manifest:
            problems.append("data.manifest is required (dataset directory or manifest file)")
        if self.split not in SPLITS:
            problems.append(f"data.split must be one of {', '.join(SPLITS)}, got '{self.split}'")
        if self.workers < 1:
            problems.append(f"data.workers must be >= 1, got {self.workers}")
        return problems


@dataclass
class MetricSettings:
    extractor: str = "toy"
    n_samples: int = 256
    splits: int = 10
    seed: int = 0
    split: str = "test"
    activation_files: Dict[str, str] = field(default_factory=dict)

    def problems(self) -> List[str]:
        problems = []
        if self.extractor not in AVAILABLE_EXTRACTORS:
            problems.append(f"metrics.extractor '{self.extractor}' is unknown; available extractors: "
                            f"{', '.join(AVAILABLE_EXTRACTORS)}")
        if self.n_samples < MIN_EVAL_SAMPLES:
            problems.append(f"metrics.n_samples must be >= {MIN_EVAL_SAMPLES}, got {self.n_samples}")
        if self.splits < 1:
            problems.append(f"metrics.splits must be >= 1, got {self.splits}")
        if self.split not in SPLITS:
            problems.append(f"metrics.split must be one of {', '.join(SPLITS)}, got '{self.split}'")
        return problems


def _type_ok(value: Any, annotation: Any) -> bool:
    origin = get_origin(annotation)
    if origin is Union:
        return any(_type_ok(value, arg) for arg in get_args(annotation))
    if annotation is type(None):
        return value is None
    if isinstance(value, bool):
        return annotation is bool
    if annotation is float:
        return isinstance(value, (int, float))
    if origin is list:
        return isinstance(value, list) and all(_type_ok(v, get_args(annotation)[0]) for v in value)
    if origin is dict:
        key_type, value_type = get_args(annotation)
        return isinstance(value, dict) and all(
            _type_ok(k, key_type) and _type_ok(v, value_type) for k, v in value.items())
    return isinstance(value, annotation)


def _parse_section(name: str, raw: Any, cls, problems: List[str], exclude: Tuple[str, ...] = ()) -> Dict[str, Any]:
    """Type-checked keyword arguments for cls; every problem is appended, nothing raised."""
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        problems.append(f"section '{name}' must be a mapping")
        return {}
    hints = get_type_hints(cls)
    allowed = {f.name for f in fields(cls)} - set(exclude)
    values = {}
    for key, value in raw.items():
        if key not in allowed:
            problems.append(f"unknown key '{name}.{key}'")
        elif not _type_ok(value, hints[key]):
            problems.append(f"{name}.{key} has the wrong type: {value!r}")
        else:
            values[key] = float(value) if hints[key] is float else value
    return values


@dataclass
class RunConfig:
    """Declarative description of one run; serialized next to every output."""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, raw: Any) -> "RunConfig":
        """Build and validate; all problems are raised together."""
        problems: List[str] = []
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigValidationError(["run config must be a mapping at the top level"])
        sections = {'model', 'train', 'data', 'metrics'}
        top = _parse_section("run", {k: v for k, v in raw.items() if k not in sections}, cls, problems,
                             exclude=tuple(sections))
        model_kw = _parse_section("model", raw.get('model'), ModelConfig, problems, exclude=('seed',))
        train_kw = _parse_section("train", raw.get('train'), TrainSettings, problems)
        data_kw = _parse_section("data", raw.get('data'), DataSettings, problems)
        metrics_kw = _parse_section("metrics", raw.get('metrics'), MetricSettings, problems)

        cfg = cls(
            model=ModelConfig(seed=top.get('seed', 0), **model_kw),
            train=TrainSettings(**train_kw),
            data=DataSettings(**data_kw),
            metrics=MetricSettings(**metrics_kw),
            **top,
        )
        problems += cfg.model.problems() + cfg.train.problems() + cfg.data.problems() + cfg.metrics.problems()
        if not cfg.seeds:
            problems.append("seeds must list at least one seed")
        if not cfg.output_dir:
            problems.append("output_dir is required")
        if problems:
            raise ConfigValidationError(problems)
        return cfg

    @classmethod
    def from_yaml(cls, path: str) -> "RunConfig":
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = yaml.safe_load(f)
        except OSError as e:
            raise ConfigValidationError([f"cannot read config {path}: {e}"]) from e
        except yaml.YAMLError as e:
            raise ConfigValidationError([f"config {path} is not valid YAML: {e}"]) from e
        return cls.from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        model = self.model.to_dict()
        model.pop('seed')
        return {
            "model": model,
            "train": vars(self.train).copy(),
            "data": vars(self.data).copy(),
            "metrics": {**vars(self.metrics), "activation_files": dict(self.metrics.activation_files)},
            "seed": self.seed,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()).encode('utf-8'))

    def with_run(self, variant: str, seed: int, output_dir: str) -> "RunConfig":
        """Same budget and data for another variant/seed pair."""
        return replace(self, model=replace(self.model, variant=variant, seed=seed),
                       seed=seed, output_dir=output_dir)


# === RUN DIRECTORY ===
@dataclass
class RunPaths:
    root: str

    @property
    def config(self) -> str:
        return os.path.join(self.root, CONFIG_NAME)

    @property
    def loss_log(self) -> str:
        return os.path.join(self.root, LOSS_LOG_NAME)

    @property
    def train_log(self) -> str:
        return os.path.join(self.root, TRAIN_LOG_NAME)

    @property
    def metrics(self) -> str:
        return os.path.join(self.root, METRICS_NAME)

    @property
    def checkpoint(self) -> str:
        return os.path.join(self.root, "checkpoints", CHECKPOINT_NAME)

    @property
    def samples(self) -> str:
        return os.path.join(self.root, "samples")

    def sample_grid(self, step: int) -> str:
        return os.path.join(self.samples, f"step_{step:06d}.png")

    def create(self) -> None:
        ensure_directories_exist(self.root, os.path.dirname(self.checkpoint), self.samples)


def configure_torch() -> None:
    torch.set_num_threads(Config.TORCH_THREADS)
    torch.use_deterministic_algorithms(True)


def grid_rows(n: int) -> int:
    """Images per grid row: the smallest square that holds n (64 -> 8x8)."""
    return max(1, math.ceil(math.sqrt(n)))


def save_grid(images: torch.Tensor, path: str) -> str:
    ensure_directories_exist(os.path.dirname(os.path.abspath(path)))
    save_image(images.to(torch.float32), path, nrow=grid_rows(images.shape[0]),
               padding=2, normalize=True, value_range=(-1.0, 1.0))
    return path


def _truncate_loss_log(path: str, step: int) -> None:
    """Keep only lines for steps <= step."""
    if not os.path.exists(path):
        atomic_write_text(path, "")
        return
    with open(path, 'r', encoding='utf-8') as f:
        kept = [line for line in f if line.strip() and int(line.split("\t", 1)[0]) <= step]
    atomic_write_text(path, "".join(kept))


def _run_batches(dataset, images, cfg: RunConfig, start_step: int, per_epoch: int):
    """Endless batch stream positioned at start_step; order depends only on (seed, epoch)."""
    epoch, offset = divmod(start_step, per_epoch)
    while True:
        batches = batch_iter(dataset, cfg.data.split, cfg.train.batch_size, cfg.seed, epoch,
                             training=True, images=images)
        yield from itertools.islice(batches, offset, None)
        epoch, offset = epoch + 1, 0


@dataclass
class TrainResult:
    output_dir: str
    step: int
    checkpoint: str
    loss_log: str
    samples: List[str]
    last_losses: Optional[Tuple[float, float]] = None


# === TRAINING ===
def train_run(cfg: RunConfig, resume: bool = True, progress: bool = True) -> TrainResult:
    """
    Train cfg.model for cfg.train.steps steps.

    With resume (default) an existing checkpoints/latest.ckpt is loaded and
    the loss log is cut back to its step, so the curve continues exactly as
    an uninterrupted run would.
    """
    paths = RunPaths(Config.resolve_output_dir(cfg.output_dir))
    paths.create()
    setup_logging(paths.train_log)
    configure_torch()
    atomic_write_text(paths.config, cfg.to_yaml())

    dataset = load_manifest(cfg.data.manifest)
    images = preload_split(dataset, cfg.data.split, cfg.model.image_size, workers=cfg.data.workers)
    per_epoch = len(images) // cfg.train.batch_size
    if per_epoch == 0:
        raise DatasetError(f"split '{cfg.data.split}' has {len(images)} images, "
                           f"fewer than one batch of {cfg.train.batch_size}")

    G, D = build_model(cfg.model)
    opts = build_optimizers(G, D, lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2))
    train_rng, sample_rng = split_generator(make_generator(cfg.seed), 2)
    fixed_latents = make_latents(cfg.train.sample_count, cfg.model.latent_dim, sample_rng, cfg.model.dtype)

    if resume and os.path.exists(paths.checkpoint):
        payload = checkpoint_load(paths.checkpoint, G, D, opts, model_config=cfg.model)
        if "extra.train_rng" in payload.tensors:
            train_rng.set_state(payload.tensors["extra.train_rng"])
        logger.info("[Train] resumed %s at step %d", cfg.model.variant, opts.step)
    _truncate_loss_log(paths.loss_log, opts.step)

    def save_checkpoint():
        checkpoint_save(paths.checkpoint, G, D, opts,
                        extra={"run_seed": cfg.seed, "data_digest": dataset.digest},
                        extra_tensors={"train_rng": train_rng.get_state()})

    samples, last = [], None
    logger.info("[Train] %s: steps %d -> %d, batch %d, %d batches/epoch", cfg.model.variant,
                opts.step, cfg.train.steps, cfg.train.batch_size, per_epoch)
    batches = _run_batches(dataset, images, cfg, opts.step, per_epoch)
    with open(paths.loss_log, 'a', encoding='utf-8') as loss_file, \
            tqdm(total=cfg.train.steps, initial=min(opts.step, cfg.train.steps),
                 desc=cfg.model.variant, disable=not progress) as bar:
        while opts.step < cfg.train.steps:
            batch = next(batches)
            try:
                loss_d, loss_g = train_step(G, D, batch.images, opts, train_rng)
            except NonFiniteError as e:
                error_logger.log_error(f"training diverged at step {opts.step + 1}", "Train", e)
                raise
            step = opts.step
            last = (loss_d.item(), loss_g.item())
            loss_file.write(f"{step}\t{last[0]!r}\t{last[1]!r}\n")
            loss_file.flush()
            bar.update(1)
            if step % cfg.train.log_every == 0:
                logger.info("[Train] step %d L_D %.4f L_G %.4f", step, *last)
            if step % cfg.train.sample_every == 0:
                samples.append(save_grid(sample_images(G, fixed_latents), paths.sample_grid(step)))
            if step % cfg.train.checkpoint_every == 0:
                save_checkpoint()

    save_checkpoint()
    final_grid = paths.sample_grid(opts.step)
    if not os.path.exists(final_grid):
        samples.append(save_grid(sample_images(G, fixed_latents), final_grid))
    logger.info("[Train] finished %s at step %d", cfg.model.variant, opts.step)
    return TrainResult(paths.root, opts.step, paths.checkpoint, paths.loss_log, samples, last)


# === SAMPLING / EVALUATION ===
def load_generator(checkpoint: str) -> Generator:
    """Rebuild the generator described by a checkpoint and load its weights."""
    payload = read_checkpoint(checkpoint)
    G, D = build_model(payload.model_config)
    checkpoint_load(checkpoint, G, D)
    return G


def sample_run(checkpoint: str, n: int, seed: int, out_dir: str) -> str:
    """n-image PNG grid from seeded latents; same checkpoint and seed give the same file."""
    configure_torch()
    G = load_generator(checkpoint)
    latents = make_latents(n, G.cfg.latent_dim, make_generator(seed), G.cfg.dtype)
    path = os.path.join(Config.resolve_output_dir(out_dir), f"samples_seed{seed}_n{n}.png")
    save_grid(sample_images(G, latents), path)
    logger.info("[CLI] wrote %d samples to %s", n, path)
    return path


def default_eval_dir(checkpoint: str) -> str:
    directory = os.path.dirname(os.path.abspath(checkpoint))
    return os.path.dirname(directory) if os.path.basename(directory) == "checkpoints" else directory


def evaluate_run(checkpoint: str, data: str, extractor_id: str = "toy", seed: int = 0,
                 n_samples: int = 256, splits: int = 10, split: str = "test",
                 out_dir: Optional[str] = None, cache_dir: Optional[str] = None,
                 activation_files: Optional[Dict[str, str]] = None,
                 workers: int = DECODE_WORKERS) -> MetricReport:
    """Evaluate a checkpoint against a dataset split and write metrics.json."""
    if extractor_id not in AVAILABLE_EXTRACTORS:
        raise UnknownExtractorError(extractor_id, AVAILABLE_EXTRACTORS)
    configure_torch()
    G = load_generator(checkpoint)
    dataset = load_manifest(data)
    size = G.cfg.image_size
    out_dir = Config.resolve_output_dir(out_dir) if out_dir else default_eval_dir(checkpoint)
    needs_real = extractor_id == "toy" or not activation_files
    real = preload_split(dataset, split, size, workers=workers) if needs_real else None
    train = preload_split(dataset, "train", size, workers=workers) if extractor_id == "toy" else None
    extractor = build_extractor(extractor_id, train=train, seed=seed,
                                cache_dir=cache_dir or os.path.join(out_dir, "extractor_cache"),
                                activation_files=activation_files)
    report = evaluate(G, real, extractor, n_samples=n_samples, seed=seed, splits=splits)
    if real is not None and len(real) >= 4:
        report.noise_floor = real_noise_floor(real, extractor, seed=seed)
    atomic_write_text(os.path.join(out_dir, METRICS_NAME), canonical_json(report.to_dict()) + "\n")
    return report


# === ABLATION ===
@dataclass
class AblationRow:
    variant: str
    fids: List[float]
    is_means: List[float]
    is_stds: List[float]
    steps: int
    seeds: List[int]

    @property
    def fid_median(self) -> float:
        return float(np.median(self.fids))

    @property
    def is_mean(self) -> float:
        return float(np.mean(self.is_means))

    @property
    def is_std(self) -> float:
        """Across-seed spread; a single seed reports its split spread."""
        return float(np.std(self.is_means)) if len(self.is_means) > 1 else float(self.is_stds[0])


@dataclass
class AblationReport:
    rows: List[AblationRow]
    extractor: str
    extractor_digest: str

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "variant": r.variant,
            "FID (median)": r.fid_median,
            "IS mean": r.is_mean,
            "IS std": r.is_std,
            "steps": r.steps,
            "seeds": ",".join(str(s) for s in r.seeds),
        } for r in self.rows])

    def format_text(self) -> str:
        table = self.frame().to_string(index=False, float_format=lambda v: f"{v:.3f}")
        notes = [f"extractor: {self.extractor} ({self.extractor_digest[:12]})",
                 "reference (published full-scale run, Inception-v3 features; not comparable):"]
        for variant, (fid, score) in REFERENCE_ROWS.items():
            notes.append(f"  {variant}: FID {fid}" + (f", IS {score}" if score is not None else ""))
        return table + "\n\n" + "\n".join(notes) + "\n"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "extractor": self.extractor,
            "extractor_digest": self.extractor_digest,
            "rows": [{
                "variant": r.variant, "fid_median": r.fid_median, "fids": r.fids,
                "is_mean": r.is_mean, "is_std": r.is_std, "steps": r.steps, "seeds": r.seeds,
            } for r in self.rows],
        }


def _train_and_evaluate(cfg_dict: Dict[str, Any], ablation_root: str) -> Dict[str, Any]:
    """One ablation cell; also the unit of work for --jobs worker processes."""
    cfg = RunConfig.from_dict(cfg_dict)
    result = train_run(cfg, progress=False)
    report = evaluate_run(
        result.checkpoint, cfg.data.manifest, cfg.metrics.extractor, seed=cfg.metrics.seed,
        n_samples=cfg.metrics.n_samples, splits=cfg.metrics.splits, split=cfg.metrics.split,
        out_dir=result.output_dir, cache_dir=os.path.join(ablation_root, "extractor_cache"),
        activation_files=cfg.metrics.activation_files or None,
        workers=cfg.data.workers,
    )
    # "seed" in the metric report is the sampling seed; the training seed is kept apart
    return {**report.to_dict(), "variant": cfg.model.variant, "train_seed": cfg.seed, "steps": result.step}


def run_ablation(cfg: RunConfig, jobs: int = 1) -> AblationReport:
    """Train and evaluate all four variants for every seed with identical budgets."""
    root = Config.resolve_output_dir(cfg.output_dir)
    ensure_directories_exist(root)
    setup_logging(os.path.join(root, "ablate.log"))
    cells = [cfg.with_run(variant, seed, os.path.join(root, variant, f"seed_{seed}")).to_dict()
             for variant in VARIANT_ORDER for seed in cfg.seeds]
    logger.info("[Ablate] %d runs (%d variants x %d seeds), %d step(s) each, jobs=%d",
                len(cells), len(VARIANT_ORDER), len(cfg.seeds), cfg.train.steps, jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_and_evaluate, cells, itertools.repeat(root)))
    else:
        results = [_train_and_evaluate(cell, root) for cell in cells]
    setup_logging(os.path.join(root, "ablate.log"))

    rows = []
    for variant in VARIANT_ORDER:
        mine = [r for r in results if r["variant"] == variant]
        rows.append(AblationRow(
            variant=variant,
            fids=[r["fid"] for r in mine],
            is_means=[r["is_mean"] for r in mine],
            is_stds=[r["is_std"] for r in mine],
            steps=cfg.train.steps,
            seeds=[r["train_seed"] for r in mine],
        ))
    report = AblationReport(rows, results[0]["extractor"], results[0]["extractor_digest"])
    atomic_write_text(os.path.join(root, "ablation.json"), canonical_json(report.to_dict()) + "\n")
    atomic_write_text(os.path.join(root, "ablation.txt"), report.format_text())
    logger.info("[Ablate] report written to %s", root)
    return report


# === PLOTTING ===
def read_loss_log(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, sep="\t", header=None, names=["step", "L_D", "L_G"])
    except (OSError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"cannot read loss log {path}: {e}") from e


def plot_losses(loss_log: str, out_path: str) -> str:
    """Render discriminator and generator loss curves to PNG."""
    frame = read_loss_log(loss_log)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(frame["step"], frame["L_D"], label="L_D (discriminator)")
    ax.plot(frame["step"], frame["L_G"], label="L_G (generator)")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    ensure_directories_exist(os.path.dirname(os.path.abspath(out_path)))
    fig.savefig(out_path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return out_path
