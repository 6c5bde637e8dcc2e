"""
Tensor primitives with reverse-mode differentiation.

Every op validates shapes, records itself on the active GradTape and refuses
to hand back NaN/Inf. Gradients come from torch autograd; this module pins
down the contracts the layers rely on.
"""
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from core_utils import AutodiffError, NonFiniteError, ShapeError

Tensor = torch.Tensor

_tape_state = threading.local()


# === TAPE ===
@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: Tuple[int, ...]
    output: int


@dataclass
class GradTape:
    """
    Ordered record of the ops executed while the tape is active.

    One tape per training step; tapes are thread-local and are not shared
    between concurrent steps.
    """
    entries: List[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        if getattr(_tape_state, 'active', None) is not None:
            raise AutodiffError("a GradTape is already active on this thread")
        _tape_state.active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_state.active = None

    def record(self, op: str, inputs: Sequence[Optional[Tensor]], output: Tensor) -> None:
        ids = tuple(id(t) for t in inputs if t is not None)
        self.entries.append(TapeEntry(op, ids, id(output)))

    @property
    def ops(self) -> List[str]:
        return [entry.op for entry in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def active_tape() -> Optional[GradTape]:
    return getattr(_tape_state, 'active', None)


def finalize_op(op: str, inputs: Sequence[Optional[Tensor]], out: Tensor) -> Tensor:
    if not torch.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values", {"shape": tuple(out.shape)})
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out)
    return out


# === RANDOMNESS ===
def make_generator(seed: int) -> torch.Generator:
    """Seeded CPU generator; all randomness in the workbench flows through one."""
    gen = torch.Generator(device='cpu')
    gen.manual_seed(int(seed))
    return gen


def split_generator(gen: torch.Generator, n: int) -> List[torch.Generator]:
    """Derive n independent generators from gen (advances gen)."""
    seeds = torch.randint(0, 2 ** 62, (n,), generator=gen, dtype=torch.int64)
    return [make_generator(int(s)) for s in seeds]


# === CONVOLUTION ===
@dataclass
class ConvParams:
    """
    Convolution parameters.

    Regular conv weight is [C_out, C_in, k_h, k_w]; transposed conv weight is
    [C_in, C_out, k_h, k_w] (input-channel axis first).
    """
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    def __post_init__(self):
        if self.weight.dim() != 4:
            raise ShapeError(f"conv weight must be 4-D, got shape {tuple(self.weight.shape)}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {tuple(self.bias.shape)} does not match {self.out_channels} output channels")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0] if self.transposed else self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] if self.transposed else self.weight.shape[0]

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        """Spatial output size; raises ShapeError when a conv would not divide exactly."""
        kh, kw = self.kernel_size
        s, p = self.stride, self.padding
        if self.transposed:
            out = ((h - 1) * s - 2 * p + kh, (w - 1) * s - 2 * p + kw)
        else:
            span_h, span_w = h + 2 * p - kh, w + 2 * p - kw
            if span_h < 0 or span_w < 0 or span_h % s or span_w % s:
                raise ShapeError(f"non-integer conv output size for input {h}x{w}, k={kh}x{kw}, s={s}, p={p}")
            out = (span_h // s + 1, span_w // s + 1)
        if out[0] < 1 or out[1] < 1:
            raise ShapeError(f"empty output {out} for input {h}x{w}")
        return out


def _check_nchw(x: Tensor, op: str, channels: Optional[int] = None) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{op} expects [N,C,H,W], got shape {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels, parameters expect {channels}")


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation, differentiable w.r.t. x, weight and bias."""
    if p.transposed:
        raise ShapeError("conv2d given transposed parameters; use deconv2d")
    _check_nchw(x, "conv2d", p.in_channels)
    p.output_size(x.shape[2], x.shape[3])
    out = F.conv2d(x, p.weight, p.bias, stride=p.stride, padding=p.padding)
    return finalize_op("conv2d", (x, p.weight, p.bias), out)


def deconv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Transposed convolution; H' = (H-1)s - 2p + k."""
    if not p.transposed:
        raise ShapeError("deconv2d needs transposed parameters ([C_in, C_out, k, k] weight)")
    _check_nchw(x, "deconv2d", p.in_channels)
    p.output_size(x.shape[2], x.shape[3])
    out = F.conv_transpose2d(x, p.weight, p.bias, stride=p.stride, padding=p.padding)
    return finalize_op("deconv2d", (x, p.weight, p.bias), out)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-sample, per-channel spatial mean, kept as [N,C,1,1]."""
    _check_nchw(x, "global_avg_pool")
    return finalize_op("global_avg_pool", (x,), x.mean(dim=(2, 3), keepdim=True))


def batch_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Batch normalisation with batch statistics (training behaviour)."""
    _check_nchw(x, "batch_norm")
    out = F.batch_norm(x, None, None, weight, bias, training=True, eps=eps)
    return finalize_op("batch_norm", (x, weight, bias), out)


# === ACTIVATIONS ===
def relu(x: Tensor) -> Tensor:
    return finalize_op("relu", (x,), torch.relu(x))


def sigmoid(x: Tensor) -> Tensor:
    return finalize_op("sigmoid", (x,), torch.sigmoid(x))


def tanh(x: Tensor) -> Tensor:
    return finalize_op("tanh", (x,), torch.tanh(x))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return finalize_op("leaky_relu", (x,), F.leaky_relu(x, negative_slope=slope))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilised by subtracting the row max."""
    if x.dim() < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a non-empty trailing axis, got {tuple(x.shape)}")
    shifted = x - x.amax(dim=-1, keepdim=True).detach()
    exp = torch.exp(shifted)
    return finalize_op("softmax_rows", (x,), exp / exp.sum(dim=-1, keepdim=True))


def dropout(x: Tensor, p: float, generator: Optional[torch.Generator] = None,
            training: bool = True, mask: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """
    Inverted dropout: out = x * mask / (1 - p), mask ~ Bernoulli(1 - p).

    Evaluation mode is the identity with an all-ones mask, whatever mask is
    passed. In training a caller-supplied mask replaces the random draw, and
    p == 0 without a mask keeps everything.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if mask is not None and mask.shape != x.shape:
        raise ShapeError(f"dropout mask shape {tuple(mask.shape)} != input shape {tuple(x.shape)}")
    if not training:
        return x, torch.ones_like(x)
    if mask is None:
        if p == 0.0:
            mask = torch.ones_like(x)
        else:
            if generator is None:
                raise AutodiffError("dropout in training mode needs an explicit generator")
            keep = torch.full(x.shape, 1.0 - p, dtype=x.dtype)
            mask = torch.bernoulli(keep, generator=generator)
    out = x * mask / (1.0 - p)
    return finalize_op("dropout", (x,), out), mask


# === BACKWARD ===
def backward(loss: Tensor, tape: Optional[GradTape] = None, retain_graph: bool = False) -> None:
    """
    Populate .grad on every requires_grad leaf reachable from loss.

    Gradients accumulate: calling backward twice without zero_grad in
    between sums both contributions.
    """
    if loss.numel() != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if tape is not None and len(tape) == 0:
        raise AutodiffError("tape recorded no operations")
    if loss.grad_fn is None:
        raise AutodiffError("loss is not attached to a recorded graph")
    loss.backward(retain_graph=retain_graph)


def zero_grad(params: Iterable[Tensor]) -> None:
    for param in params:
        param.grad = None


# === GRADIENT CHECK ===
def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                   max_coords: Optional[int] = None, generator: Optional[torch.Generator] = None) -> float:
    """
    Max relative error between autograd and central finite differences.

    fn must return a scalar. Inputs should be float64 leaves with
    requires_grad set. The relative error uses max(|a|, |n|, 1e-3) as
    denominator. max_coords samples that many coordinates per input.
    """
    for t in inputs:
        if t.dtype != torch.float64:
            raise AutodiffError("gradient checks run in float64")
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    analytic = [t.grad.detach().clone() for t in inputs]

    worst = 0.0
    with torch.no_grad():
        for t, grad in zip(inputs, analytic):
            flat = t.view(-1)
            coords = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = torch.randperm(flat.numel(), generator=generator)[:max_coords].tolist()
            for i in coords:
                original = flat[i].item()
                flat[i] = original + h
                plus = fn(*inputs).item()
                flat[i] = original - h
                minus = fn(*inputs).item()
                flat[i] = original
                numeric = (plus - minus) / (2 * h)
                a = grad.view(-1)[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
                worst = max(worst, err)
    return worst


__all__ = [
    'Tensor', 'TapeEntry', 'GradTape', 'active_tape',
    'make_generator', 'split_generator', 'ConvParams',
    'conv2d', 'deconv2d', 'global_avg_pool', 'batch_norm',
    'relu', 'sigmoid', 'tanh', 'leaky_relu', 'softmax_rows', 'dropout',
    'backward', 'zero_grad', 'gradient_check', 'finalize_op',
]
