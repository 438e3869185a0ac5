"""Dense tensor primitives on top of torch autograd, plus a finite-difference
gradient oracle used throughout the test-suite.

torch tensors play the role of the differentiable tensor type: reverse-mode
gradients accumulate into ``.grad`` and callers zero them explicitly before each
optimizer step.  Randomness is always passed in as a ``torch.Generator``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import EvaluationError, ParameterError, ShapeError

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def resolve_dtype(name: str | torch.dtype) -> torch.dtype:
    if isinstance(name, torch.dtype):
        return name
    try:
        return DTYPES[name]
    except KeyError:
        raise ParameterError(f"unsupported dtype {name!r}; expected one of {sorted(DTYPES)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product of an (..., m, k) and a (..., k, n) tensor."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def softmax_rows(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    shifted = logits - logits.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def dropout(
    x: torch.Tensor,
    rate: float,
    training: bool,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep.to(x.dtype).mul_(1.0 / (1.0 - rate))


_flush_depth = 0


@contextlib.contextmanager
def flush_denormals():
    """Treat subnormal floats as zero inside the block.

    Once attention sharpens, many softmax weights and their gradients fall into
    the subnormal range, where CPU arithmetic is several times slower.  Nested
    use is fine; the setting is restored when the outermost block exits.
    """
    global _flush_depth
    if _flush_depth == 0:
        # numpy computes its float limits lazily and warns if that happens under flushing
        np.finfo(np.float64), np.finfo(np.float32)
        torch.set_flush_denormal(True)
    _flush_depth += 1
    try:
        yield
    finally:
        _flush_depth -= 1
        if _flush_depth == 0:
            torch.set_flush_denormal(False)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst: tuple[int, int] | None = None  # (param index, flat coordinate)
    details: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _scalar(f: Callable[[], torch.Tensor]) -> torch.Tensor:
    out = f()
    if out.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    if not torch.isfinite(out).all():
        raise EvaluationError(f"function under check is not finite: {out.item()}")
    return out.reshape(())


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int | None = 20,
    seed: int = 0,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    ``f`` closes over ``params`` and must be deterministic.  ``n_coords``
    coordinates are sampled uniformly over all parameters (None checks every
    coordinate).  Relative error is |a - n| / max(|a|, |n|, atol).
    """
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    for p in params:
        p.grad = None
    _scalar(f).backward()
    analytic = [
        (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)).reshape(-1)
        for p in params
    ]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    if n_coords is None or n_coords >= total:
        flat_ids = np.arange(total)
    else:
        flat_ids = np.sort(rng.choice(total, size=n_coords, replace=False))
    offsets = np.cumsum([0] + sizes)

    report = GradCheckReport(max_rel_error=0.0, tol=tol, checked=0)
    with torch.no_grad():
        for gid in flat_ids:
            pi = int(np.searchsorted(offsets, gid, side="right") - 1)
            ci = int(gid - offsets[pi])
            data = params[pi].data
            idx = tuple(int(i) for i in np.unravel_index(ci, data.shape)) if data.dim() else ()
            orig = data[idx].item()
            data[idx] = orig + h
            f_plus = _scalar(f).item()
            data[idx] = orig - h
            f_minus = _scalar(f).item()
            data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[pi][ci].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            report.details.append((pi, ci, a, numeric, rel))
            report.checked += 1
            if report.worst is None or rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (pi, ci)
    for p in params:
        p.grad = None
    if math.isnan(report.max_rel_error):
        raise EvaluationError("gradient check produced NaN relative error")
    return report
