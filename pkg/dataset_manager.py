"""
Dataset ingestion, preprocessing, deterministic splitting and the synthetic
face generator used for desk-scale runs.

Manifest format: '#' metadata lines, then one
    id<TAB>relative-path<TAB>label<TAB>split
line per image.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from core_utils import DatasetError, atomic_write_text, ensure_directories_exist, sha256_bytes

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
MANIFEST_HEADER = "# gan-workbench manifest v1"
RESIZE_FILTER = "bilinear"
SPLITS = ("train", "val", "test")
TRAIN_FRACTION = 0.8
VAL_FRACTION = 0.1
MIN_SPLIT_ITEMS = 10
# 8-bit modes PIL converts to RGB (grayscale expanded, alpha and palette dropped)
ACCEPTED_MODES = {"1", "L", "LA", "P", "PA", "RGB", "RGBA", "RGBX", "CMYK", "YCbCr"}
DECODE_WORKERS = 4

HAIR_PALETTE = [
    (40, 30, 25),     # black-brown
    (230, 200, 90),   # blonde
    (200, 60, 50),    # red
    (70, 110, 220),   # blue
    (240, 150, 200),  # pink
    (90, 180, 90),    # green
    (200, 200, 210),  # silver
    (140, 80, 190),   # purple
]
EYE_PALETTE = [(60, 90, 200), (40, 140, 60), (150, 60, 30), (170, 40, 160), (30, 30, 30)]


# === MANIFEST / DATASET ===
@dataclass(frozen=True)
class ManifestItem:
    id: str
    path: str
    label: int
    split: str = "train"


@dataclass
class Dataset:
    root: str
    items: List[ManifestItem]
    metadata: Dict[str, str] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        """Digest over entries and the resize filter."""
        lines = [f"filter={self.metadata.get('filter', RESIZE_FILTER)}"]
        lines += [f"{i.id}\t{i.path}\t{i.label}\t{i.split}" for i in self.items]
        return sha256_bytes("\n".join(lines).encode('utf-8'))

    def split_items(self, split: str) -> List[ManifestItem]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split '{split}' (expected one of {', '.join(SPLITS)})")
        return [item for item in self.items if item.split == split]

    def paths(self, items: Sequence[ManifestItem]) -> List[str]:
        return [os.path.join(self.root, item.path) for item in items]

    @property
    def num_classes(self) -> int:
        return max((item.label for item in self.items), default=-1) + 1


def write_manifest(dataset: Dataset, path: Optional[str] = None) -> str:
    path = path or os.path.join(dataset.root, MANIFEST_NAME)
    lines = [MANIFEST_HEADER]
    meta = dict(dataset.metadata)
    meta.setdefault('filter', RESIZE_FILTER)
    lines += [f"# {key}={meta[key]}" for key in sorted(meta)]
    lines += [f"{i.id}\t{i.path}\t{i.label}\t{i.split}" for i in dataset.items]
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def load_manifest(path: str) -> Dataset:
    """Read a manifest file; a directory argument means <dir>/manifest.tsv."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw_lines = f.read().splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read manifest {path}: {e}") from e

    items, metadata, seen = [], {}, set()
    for number, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                metadata[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DatasetError(f"{path}:{number}: expected 4 tab-separated fields, got {len(parts)}")
        item_id, rel_path, label, split = parts
        if split not in SPLITS:
            raise DatasetError(f"{path}:{number}: unknown split '{split}'")
        if item_id in seen:
            raise DatasetError(f"{path}:{number}: duplicate id '{item_id}'")
        try:
            label_value = int(label)
        except ValueError as e:
            raise DatasetError(f"{path}:{number}: label '{label}' is not an integer") from e
        seen.add(item_id)
        items.append(ManifestItem(item_id, rel_path, label_value, split))
    if not items:
        raise DatasetError(f"manifest {path} lists no images")
    return Dataset(root=os.path.dirname(os.path.abspath(path)), items=items, metadata=metadata)


def split_counts(n: int) -> Tuple[int, int, int]:
    """floor(0.8N) / floor(0.1N) / remainder."""
    n_train = int(np.floor(n * TRAIN_FRACTION))
    n_val = int(np.floor(n * VAL_FRACTION))
    return n_train, n_val, n - n_train - n_val


def split_dataset(manifest, seed: int) -> Dataset:
    """
    Assign train/val/test tags by a seeded shuffle.

    Accepts a Dataset or a list of ManifestItem. The assignment is a pure
    function of (item order, seed); item order itself is preserved.
    """
    dataset = manifest if isinstance(manifest, Dataset) else Dataset(root="", items=list(manifest))
    n = len(dataset.items)
    if n < MIN_SPLIT_ITEMS:
        raise DatasetError(f"need at least {MIN_SPLIT_ITEMS} items to split, got {n}")
    n_train, n_val, _ = split_counts(n)
    order = np.random.default_rng(seed).permutation(n)
    tags = np.empty(n, dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train:n_train + n_val]] = "val"
    tags[order[n_train + n_val:]] = "test"
    items = [replace(item, split=str(tag)) for item, tag in zip(dataset.items, tags)]
    metadata = dict(dataset.metadata, split_seed=str(seed))
    return Dataset(root=dataset.root, items=items, metadata=metadata)


# === PREPROCESSING ===
@dataclass
class ImageBatch:
    images: torch.Tensor          # [N, 3, S, S] in [-1, 1]
    ids: List[str]
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[1] != 3:
            raise DatasetError(f"image batch must be [N, 3, S, S], got {tuple(self.images.shape)}")
        if len(self.ids) != self.images.shape[0]:
            raise DatasetError(f"{len(self.ids)} ids for {self.images.shape[0]} images")
        if self.images.numel() and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise DatasetError("image values fall outside [-1, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]


def _decode_rgb(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ACCEPTED_MODES:
                raise DatasetError(f"{path}: image mode {im.mode} is not 8-bit RGB-convertible")
            return np.array(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise DatasetError(f"cannot decode image {path}: {e}") from e


def preprocess_array(rgb: np.ndarray, target: int) -> torch.Tensor:
    """uint8 HxWx3 -> float64 [3, target, target] in [-1, 1] (bilinear resize)."""
    x = torch.from_numpy(np.ascontiguousarray(rgb)).permute(2, 0, 1).to(torch.float64) / 255.0
    if x.shape[1:] != (target, target):
        x = F.interpolate(x.unsqueeze(0), size=(target, target), mode=RESIZE_FILTER,
                          align_corners=False).squeeze(0)
    return x * 2.0 - 1.0


def load_and_preprocess(paths: Sequence[str], target: int = 64,
                        workers: int = DECODE_WORKERS) -> ImageBatch:
    """Decode, resize to target x target and normalise to [-1, 1]."""
    if not paths:
        return ImageBatch(torch.empty(0, 3, target, target, dtype=torch.float64), [])
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        arrays = list(pool.map(_decode_rgb, paths))
    images = torch.stack([preprocess_array(a, target) for a in arrays])
    ids = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    return ImageBatch(images, ids)


def preload_split(dataset: Dataset, split: str, image_size: int = 64,
                  workers: int = DECODE_WORKERS) -> ImageBatch:
    """Decode a whole split once; rows follow the manifest order of the split."""
    items = dataset.split_items(split)
    batch = load_and_preprocess(dataset.paths(items), target=image_size, workers=workers)
    labels = torch.tensor([item.label for item in items], dtype=torch.int64)
    logger.info("[Data] loaded %d %s images at %dx%d", len(items), split, image_size, image_size)
    return ImageBatch(batch.images, [item.id for item in items], labels)


def batch_iter(ds: Dataset, split: str, batch_size: int, seed: int, epoch: int = 0,
               training: bool = True, image_size: int = 64,
               images: Optional[ImageBatch] = None) -> Iterator[ImageBatch]:
    """
    Deterministic batches for one epoch, order defined by (seed, epoch).

    Training drops the final partial batch; evaluation keeps it. `images`
    may carry the preloaded split to avoid decoding per batch.
    """
    if batch_size < 1:
        raise DatasetError(f"batch_size must be positive, got {batch_size}")
    items = ds.split_items(split)
    if images is not None and len(images) != len(items):
        raise DatasetError(f"preloaded batch has {len(images)} rows, split '{split}' has {len(items)}")
    order = np.random.default_rng([seed, epoch]).permutation(len(items))
    for start in range(0, len(items), batch_size):
        index = order[start:start + batch_size]
        if training and len(index) < batch_size:
            break
        if images is not None:
            selected = torch.as_tensor(index, dtype=torch.int64)
            labels = images.labels[selected] if images.labels is not None else None
            yield ImageBatch(images.images[selected], [images.ids[i] for i in index], labels)
        else:
            chosen = [items[i] for i in index]
            batch = load_and_preprocess(ds.paths(chosen), target=image_size)
            labels = torch.tensor([item.label for item in chosen], dtype=torch.int64)
            yield ImageBatch(batch.images, [item.id for item in chosen], labels)


# === SYNTHETIC FACES ===
@dataclass(frozen=True)
class SyntheticFaceSpec:
    seed: int = 0
    image_size: int = 64
    num_classes: int = 4

    def validate(self) -> None:
        if self.image_size < 8:
            raise DatasetError(f"synthetic image_size must be >= 8, got {self.image_size}")
        if not 1 <= self.num_classes <= len(HAIR_PALETTE):
            raise DatasetError(f"num_classes must be in [1, {len(HAIR_PALETTE)}], got {self.num_classes}")


@dataclass(frozen=True)
class FaceParams:
    label: int
    background: Tuple[int, int, int]
    face_center: Tuple[int, int]
    face_axes: Tuple[int, int]
    face_color: Tuple[int, int, int]
    eyes: Tuple[Tuple[int, int], Tuple[int, int]]
    eye_radius: int
    eye_color: Tuple[int, int, int]
    hair_color: Tuple[int, int, int]

    def eye_inside_face(self, eye: Tuple[int, int]) -> bool:
        (cx, cy), (ax, ay) = self.face_center, self.face_axes
        return ((eye[0] - cx) / ax) ** 2 + ((eye[1] - cy) / ay) ** 2 < 1.0


def _color(rng: np.random.Generator, base, jitter: int) -> Tuple[int, int, int]:
    values = np.clip(np.asarray(base) + rng.integers(-jitter, jitter + 1, size=3), 0, 255)
    return tuple(int(v) for v in values)


def face_params(spec: SyntheticFaceSpec, index: int) -> FaceParams:
    """Per-image parameters; a pure function of (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    s = spec.image_size
    label = index % spec.num_classes
    cx = int(round(s * (0.5 + rng.uniform(-0.05, 0.05))))
    cy = int(round(s * (0.56 + rng.uniform(-0.04, 0.04))))
    ax = max(3, int(round(s * rng.uniform(0.24, 0.31))))
    ay = max(4, int(round(s * rng.uniform(0.29, 0.36))))
    # Eyes sit on a horizontal line inside the upper face
    u, v = rng.uniform(0.30, 0.45), rng.uniform(0.05, 0.20)
    left = (int(round(cx - u * ax)), int(round(cy - v * ay)))
    right = (int(round(cx + u * ax)), int(round(cy - v * ay)))
    return FaceParams(
        label=label,
        background=_color(rng, rng.integers(60, 200, size=3), 0),
        face_center=(cx, cy),
        face_axes=(ax, ay),
        face_color=_color(rng, (250, 225, 205), 12),
        eyes=(left, right),
        eye_radius=max(1, int(round(s * rng.uniform(0.045, 0.07)))),
        eye_color=EYE_PALETTE[int(rng.integers(len(EYE_PALETTE)))],
        hair_color=_color(rng, HAIR_PALETTE[label], 12),
    )


def render_face(params: FaceParams, size: int) -> np.ndarray:
    """Draw a face as uint8 RGB [size, size, 3]."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = params.background
    (cx, cy), (ax, ay) = params.face_center, params.face_axes
    hair_pad = max(1, size // 16)
    # Back hair, face, then bangs over the forehead
    cv2.ellipse(img, (cx, cy - hair_pad), (ax + 2 * hair_pad, ay + hair_pad), 0, 0, 360, params.hair_color, -1)
    cv2.ellipse(img, (cx, cy), (ax, ay), 0, 0, 360, params.face_color, -1)
    cv2.ellipse(img, (cx, cy - ay // 2), (ax, max(1, ay // 2)), 0, 180, 360, params.hair_color, -1)
    for eye in params.eyes:
        cv2.circle(img, eye, params.eye_radius, params.eye_color, -1)
    return img


def generate_synthetic_dataset(spec: SyntheticFaceSpec, n: int, out_dir: str) -> Dataset:
    """
    Render n labelled faces as PNG files plus a manifest.

    Labels are assigned round-robin so classes stay balanced within one.
    Datasets of 10 or more images are split 80:10:10 with spec.seed;
    smaller ones are all training data.
    """
    spec.validate()
    if n < 1:
        raise DatasetError(f"n must be >= 1, got {n}")
    image_dir = os.path.join(out_dir, "images")
    ensure_directories_exist(image_dir)

    items = []
    for index in range(n):
        params = face_params(spec, index)
        image = render_face(params, spec.image_size)
        item_id = f"face_{index:05d}"
        rel_path = f"images/{item_id}.png"
        if not cv2.imwrite(os.path.join(out_dir, rel_path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
            raise DatasetError(f"failed to write {rel_path}")
        items.append(ManifestItem(item_id, rel_path, params.label, "train"))

    metadata = {
        "filter": RESIZE_FILTER,
        "seed": str(spec.seed),
        "image_size": str(spec.image_size),
        "num_classes": str(spec.num_classes),
    }
    dataset = Dataset(root=os.path.abspath(out_dir), items=items, metadata=metadata)
    if n >= MIN_SPLIT_ITEMS:
        dataset = split_dataset(dataset, spec.seed)
    write_manifest(dataset)
    logger.info("[Data] generated %d synthetic faces in %s (digest %s)", n, out_dir, dataset.digest[:12])
    return dataset
