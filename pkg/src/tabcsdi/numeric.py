"""Tensor primitives, gradients, Adam and the milestone learning-rate schedule.

Tensors are ``torch.Tensor`` objects and the autograd graph plays the role of
the computation tape. The primitives below are the only operations the
denoiser is built from; each one validates operand shapes up front so that a
mismatch is reported with the operation name and both shapes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import torch

__all__ = [
    "ShapeError",
    "precision",
    "deterministic",
    "matmul",
    "add",
    "mul",
    "linear",
    "softmax",
    "layer_norm",
    "silu",
    "gelu",
    "reshape",
    "transpose",
    "concat",
    "masked_mse",
    "backward",
    "Adam",
    "lr_at_epoch",
    "milestones",
    "numerical_gradient",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


def _fail(op: str, *shapes: Sequence[int]) -> None:
    desc = " and ".join(str(tuple(s)) for s in shapes)
    raise ShapeError(f"{op}: incompatible shapes {desc}")


@contextlib.contextmanager
def precision(dtype: str | torch.dtype) -> Iterator[None]:
    """Temporarily switch the default real type (``"float32"`` or ``"float64"``)."""
    if isinstance(dtype, str):
        dtype = {"float32": torch.float32, "float64": torch.float64}[dtype]
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def deterministic(threads: int = 1) -> None:
    """Strict-deterministic mode: fixed thread count and deterministic kernels."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        _fail("matmul", a.shape, b.shape)
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError:
        _fail("matmul", a.shape, b.shape)
    return torch.matmul(a, b)


def _broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _fail(op, a.shape, b.shape)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("mul", a, b)
    return a * b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        _fail("linear", x.shape, weight.shape)
    out = torch.matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            _fail("linear bias", weight.shape, bias.shape)
        out = out + bias
    return out


def softmax(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis."""
    return torch.softmax(x, dim=-1)


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor | None = None,
    shift: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Normalize the last axis to zero mean / unit (biased) variance, then scale and shift."""
    for name, p in (("gain", gain), ("shift", shift)):
        if p is not None and p.shape != x.shape[-1:]:
            _fail(f"layer_norm {name}", x.shape, p.shape)
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if shift is not None:
        out = out + shift
    return out


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.gelu(x)


def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    known = math.prod(s for s in shape if s != -1)
    if (-1 not in shape and known != x.numel()) or (known == 0 or x.numel() % known):
        _fail("reshape", x.shape, shape)
    return x.reshape(*shape)


def transpose(x: torch.Tensor, dim0: int = -2, dim1: int = -1) -> torch.Tensor:
    return x.transpose(dim0, dim1)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    first = tensors[0]
    for other in tensors[1:]:
        if other.dim() != first.dim():
            _fail("concat", first.shape, other.shape)
        a = list(first.shape)
        b = list(other.shape)
        del a[dim], b[dim]
        if a != b:
            _fail("concat", first.shape, other.shape)
    return torch.cat(list(tensors), dim=dim)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Sum of squared error over ``mask`` divided by the mask count."""
    if pred.shape != target.shape or pred.shape != mask.shape:
        _fail("masked_mse", pred.shape, target.shape, mask.shape)
    count = mask.sum()
    if count <= 0:
        raise ValueError("masked_mse: mask selects no cells")
    diff = (pred - target) * mask
    return (diff * diff).sum() / count


# ---------------------------------------------------------------------------
# gradients


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters that do not influence the loss get a zero gradient. A loss that
    is not attached to the graph at all is rejected.
    """
    params = list(params)
    if loss.numel() != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is detached from every trainable tensor")
    for i, p in enumerate(params):
        if not p.requires_grad:
            raise ValueError(f"backward: parameter {i} with shape {tuple(p.shape)} is not trainable")
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def numerical_gradient(
    fn: Callable[[], torch.Tensor],
    param: torch.Tensor,
    h: float = 1e-5,
    entries: Sequence[int] | None = None,
) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn()`` with respect to ``param``.

    With ``entries`` (flat indices) only those coordinates are probed and a 1-D
    tensor of their derivatives is returned.
    """
    flat = param.data.view(-1)
    idx = range(flat.numel()) if entries is None else list(entries)
    out = torch.zeros(len(idx), dtype=param.dtype)
    with torch.no_grad():
        for n, k in enumerate(idx):
            orig = flat[k].item()
            flat[k] = orig + h
            up = fn().item()
            flat[k] = orig - h
            down = fn().item()
            flat[k] = orig
            out[n] = (up - down) / (2 * h)
    return out.view_as(param) if entries is None else out


# ---------------------------------------------------------------------------
# optimizer and schedule


class Adam:
    """Bias-corrected Adam updating tensors in place.

    ``names`` is only used to identify the offending parameter when a
    non-finite gradient arrives.
    """

    def __init__(
        self,
        params: Sequence[torch.Tensor],
        lr: float = 5e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        names: Sequence[str] | None = None,
    ) -> None:
        self.params = list(params)
        self.names = list(names) if names is not None else [f"param[{i}]" for i in range(len(self.params))]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[torch.Tensor], lr: float | None = None) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"adam: expected {len(self.params)} gradients, got {len(grads)}")
        for name, p, g in zip(self.names, self.params, grads):
            if g.shape != p.shape:
                _fail(f"adam ({name})", p.shape, g.shape)
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"adam: non-finite gradient for {name}")
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        with torch.no_grad():
            for p, g, m, v in zip(self.params, grads, self.m, self.v):
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                denom = (v / bc2).sqrt_().add_(self.eps)
                p.addcdiv_(m / bc1, denom, value=-lr)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": [t.clone() for t in self.m], "v": [t.clone() for t in self.v]}


def milestones(total_epochs: int, fractions: Sequence[float] = (0.25, 0.5, 0.75, 0.9)) -> list[int]:
    if total_epochs <= 0:
        raise ValueError(f"total_epochs must be positive, got {total_epochs}")
    return [math.floor(f * total_epochs) for f in fractions]


def lr_at_epoch(epoch: int, total_epochs: int, base_lr: float, gamma: float = 0.1) -> float:
    """Learning rate after decaying by ``gamma`` at 25/50/75/90% of training."""
    marks = milestones(total_epochs)
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if base_lr <= 0:
        raise ValueError(f"base_lr must be positive, got {base_lr}")
    passed = sum(1 for m in marks if epoch >= m)
    return base_lr * gamma**passed
