"""
Checkpoint container for generator, discriminator and optimizer state.

Layout (little-endian):
    magic "UCGANCKP" | u16 format version | 32-byte model config digest
    | u32 metadata length | metadata JSON
    | u32 blob count | blobs | 32-byte SHA-256 of everything before it
Each blob: u16 name length | name | u8 dtype code | u8 ndim | u32 dims... | u64 byte count | data
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from core_utils import CheckpointError, atomic_write_bytes, canonical_json, sha256_bytes
from gan_training import Discriminator, Generator, ModelConfig, TrainerOptimizers

logger = logging.getLogger(__name__)

MAGIC = b"UCGANCKP"
FORMAT_VERSION = 1
DIGEST_SIZE = 32

# dtype code -> (torch dtype, numpy little-endian dtype)
_DTYPES = {
    0: (torch.float32, np.dtype('<f4')),
    1: (torch.float64, np.dtype('<f8')),
    2: (torch.int64, np.dtype('<i8')),
    3: (torch.uint8, np.dtype('u1')),
}
_CODES = {torch_dtype: code for code, (torch_dtype, _) in _DTYPES.items()}


@dataclass
class CheckpointPayload:
    """Everything read back from a checkpoint file, before it touches any model."""
    model_config: ModelConfig
    step: int
    tensors: Dict[str, torch.Tensor]
    param_groups: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def state_dict(self, prefix: str) -> Dict[str, torch.Tensor]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def optimizer_state(self, prefix: str) -> Dict[str, Any]:
        state: Dict[int, Dict[str, torch.Tensor]] = {}
        for key, value in self.state_dict(prefix).items():
            index, name = key.split(".", 1)
            state.setdefault(int(index), {})[name] = value
        return {"state": state, "param_groups": self.param_groups[prefix]}


# === ENCODING ===
def _encode_blob(name: str, tensor: torch.Tensor) -> bytes:
    tensor = tensor.detach().cpu().contiguous()
    if tensor.dtype not in _CODES:
        raise CheckpointError(f"cannot store tensor '{name}' of dtype {tensor.dtype}")
    code = _CODES[tensor.dtype]
    data = tensor.numpy().astype(_DTYPES[code][1], copy=False).tobytes()
    name_bytes = name.encode('utf-8')
    header = struct.pack('<H', len(name_bytes)) + name_bytes
    header += struct.pack('<BB', code, tensor.dim())
    header += struct.pack(f'<{tensor.dim()}I', *tensor.shape)
    return header + struct.pack('<Q', len(data)) + data


def _optimizer_tensors(prefix: str, optimizer: torch.optim.Optimizer) -> Dict[str, torch.Tensor]:
    tensors = {}
    for index, state in optimizer.state_dict()['state'].items():
        for key, value in state.items():
            if not torch.is_tensor(value):
                value = torch.tensor(value)
            tensors[f"{prefix}.{index}.{key}"] = value
    return tensors


def checkpoint_save(path: str, G: Generator, D: Discriminator,
                    opt_states: Optional[TrainerOptimizers] = None,
                    step: Optional[int] = None, extra: Optional[Dict[str, Any]] = None,
                    extra_tensors: Optional[Dict[str, torch.Tensor]] = None) -> str:
    """Write a checkpoint atomically; returns its SHA-256."""
    cfg: ModelConfig = G.cfg
    tensors: Dict[str, torch.Tensor] = {}
    tensors.update({f"G.{k}": v for k, v in G.state_dict().items()})
    tensors.update({f"D.{k}": v for k, v in D.state_dict().items()})
    param_groups = {}
    if opt_states is not None:
        for prefix, optimizer in (("opt_d", opt_states.d), ("opt_g", opt_states.g)):
            tensors.update(_optimizer_tensors(prefix, optimizer))
            param_groups[prefix] = optimizer.state_dict()['param_groups']
        step = opt_states.step if step is None else step
    for key, value in (extra_tensors or {}).items():
        tensors[f"extra.{key}"] = value

    metadata = canonical_json({
        "model_config": cfg.to_dict(),
        "step": int(step or 0),
        "param_groups": param_groups,
        "extra": extra or {},
    }).encode('utf-8')

    body = bytearray(MAGIC)
    body += struct.pack('<H', FORMAT_VERSION)
    body += cfg.digest()
    body += struct.pack('<I', len(metadata)) + metadata
    body += struct.pack('<I', len(tensors))
    for name in sorted(tensors):
        body += _encode_blob(name, tensors[name])
    checksum = bytes.fromhex(sha256_bytes(bytes(body)))
    atomic_write_bytes(path, bytes(body) + checksum)
    logger.info("[Checkpoint] saved %s (step %d, %d tensors)", path, int(step or 0), len(tensors))
    return checksum.hex()


# === DECODING ===
class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str) -> CheckpointPayload:
    """Parse and verify a checkpoint file without touching any model."""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    minimum = len(MAGIC) + 2 + DIGEST_SIZE + 4 + 4 + DIGEST_SIZE
    if len(data) < minimum:
        raise CheckpointError(f"checkpoint {path} is truncated ({len(data)} bytes)")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    body, checksum = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if sha256_bytes(body) != checksum.hex():
        raise CheckpointError(f"checkpoint {path} is corrupt or truncated (checksum mismatch)")

    reader = _Reader(body)
    reader.take(len(MAGIC))
    (version,) = reader.unpack('<H')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    digest = reader.take(DIGEST_SIZE)
    (meta_len,) = reader.unpack('<I')
    try:
        metadata = json.loads(reader.take(meta_len).decode('utf-8'))
        cfg = ModelConfig.from_dict(metadata["model_config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint {path} has unreadable metadata: {e}") from e
    if cfg.digest() != digest:
        raise CheckpointError(f"checkpoint {path}: config digest does not match its metadata")

    tensors = {}
    (count,) = reader.unpack('<I')
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        code, ndim = reader.unpack('<BB')
        if code not in _DTYPES:
            raise CheckpointError(f"tensor '{name}' has unknown dtype code {code}")
        shape = reader.unpack(f'<{ndim}I') if ndim else ()
        (nbytes,) = reader.unpack('<Q')
        torch_dtype, np_dtype = _DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(f"tensor '{name}' declares {nbytes} bytes, shape {shape} needs {expected}")
        array = np.frombuffer(reader.take(nbytes), dtype=np_dtype).reshape(shape)
        tensors[name] = torch.from_numpy(array.astype(np_dtype.newbyteorder('='), copy=True)).to(torch_dtype)
    if reader.pos != len(body):
        raise CheckpointError(f"checkpoint {path} has {len(body) - reader.pos} trailing bytes")

    return CheckpointPayload(
        model_config=cfg,
        step=int(metadata.get("step", 0)),
        tensors=tensors,
        param_groups=metadata.get("param_groups", {}),
        extra=metadata.get("extra", {}),
    )


def _check_state(module: torch.nn.Module, state: Dict[str, torch.Tensor], label: str) -> None:
    current = module.state_dict()
    missing = sorted(set(current) - set(state))
    unexpected = sorted(set(state) - set(current))
    if missing or unexpected:
        raise CheckpointError(f"{label} state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for key, value in state.items():
        if tuple(value.shape) != tuple(current[key].shape):
            raise CheckpointError(f"{label}.{key}: checkpoint shape {tuple(value.shape)} "
                                  f"!= model shape {tuple(current[key].shape)}")


def checkpoint_load(path: str, G: Generator, D: Discriminator,
                    opt_states: Optional[TrainerOptimizers] = None,
                    model_config: Optional[ModelConfig] = None) -> CheckpointPayload:
    """
    Restore models (and optimizers) from a checkpoint.

    The whole file is parsed and checked before any state is applied, so a
    failed load leaves the models untouched.
    """
    payload = read_checkpoint(path)
    expected = model_config or G.cfg
    if payload.model_config.digest() != expected.digest():
        saved = payload.model_config
        raise CheckpointError(
            f"checkpoint {path} was written for variant {saved.variant} "
            f"({canonical_json(saved.to_dict())}) but variant {expected.variant} "
            f"({canonical_json(expected.to_dict())}) was requested"
        )
    g_state, d_state = payload.state_dict("G"), payload.state_dict("D")
    _check_state(G, g_state, "G")
    _check_state(D, d_state, "D")
    if opt_states is not None and not {"opt_d", "opt_g"} <= set(payload.param_groups):
        raise CheckpointError(f"checkpoint {path} carries no optimizer state")

    G.load_state_dict(g_state)
    D.load_state_dict(d_state)
    if opt_states is not None:
        opt_states.d.load_state_dict(payload.optimizer_state("opt_d"))
        opt_states.g.load_state_dict(payload.optimizer_state("opt_g"))
        opt_states.step = payload.step
    logger.info("[Checkpoint] loaded %s (%s, step %d)", path, payload.model_config.variant, payload.step)
    return payload
