"""Central-difference gradient checking against autograd, in float64."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .models import CnnSpec, CoordCNN, DigitTransformer, SymbolicStage, TransformerSpec


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    probed: int
    skipped: int  # probes whose ±2 epsilon window crossed a ReLU or max-pool switch

    def __float__(self) -> float:
        return self.max_rel_error


@contextmanager
def _branch_recorder(model: nn.Module):
    """Collect ReLU masks and max-pool winners during forward passes."""
    record: list[torch.Tensor] = []

    def relu_hook(_, inp, __):
        record.append(inp[0] > 0)

    def pool_hook(mod, inp, __):
        record.append(F.max_pool2d(inp[0], mod.kernel_size, mod.stride, return_indices=True)[1])

    handles = []
    for m in model.modules():
        if isinstance(m, nn.ReLU):
            handles.append(m.register_forward_hook(relu_hook))
        elif isinstance(m, nn.MaxPool2d):
            handles.append(m.register_forward_hook(pool_hook))
    try:
        yield record
    finally:
        for h in handles:
            h.remove()


def _same(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def grad_check_detailed(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor], epsilon: float = 1e-3,
                        max_probes: int = 5000, seed: int = 0) -> GradCheckResult:
    """Compare autograd against finite differences on a random subset of entries.

    The difference uses the five-point stencil at ``±epsilon`` and ``±2 epsilon``;
    its O(epsilon^4) truncation keeps tiny gradient entries from reading as large
    relative errors. Relative error is ``|g_analytic - g_fd| / max(|g_fd|, 1e-8)``.
    Entries whose perturbation flips a ReLU or max-pool decision are not
    differentiable across the window and are skipped. The model is converted to
    float64 in place.
    """
    model.double()
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    with _branch_recorder(model) as rec:
        loss_fn(model).backward()
        base = list(rec)
    analytic = [p.grad.detach().clone() for p in params]

    sizes = np.array([p.numel() for p in params])
    bounds = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(int(bounds[-1]), size=min(max_probes, int(bounds[-1])), replace=False))
    worst, skipped = 0.0, 0
    with torch.no_grad():
        for k in flat:
            pi = int(np.searchsorted(bounds, k, side="right"))
            j = int(k - (bounds[pi - 1] if pi else 0))
            w = params[pi].view(-1)
            old = w[j].item()
            f = {}
            kinked = False
            with _branch_recorder(model) as rec:
                for h in (1, -1, 2, -2):
                    rec.clear()
                    w[j] = old + h * epsilon
                    f[h] = loss_fn(model).item()
                    kinked = kinked or not _same(base, list(rec))
            w[j] = old
            if kinked:
                skipped += 1
                continue
            g_fd = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * epsilon)
            g_an = analytic[pi].view(-1)[j].item()
            worst = max(worst, abs(g_an - g_fd) / max(abs(g_fd), 1e-8))
    return GradCheckResult(worst, len(flat), skipped)


def grad_check(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor], epsilon: float = 1e-3,
               max_probes: int = 5000, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_detailed(model, loss_fn, epsilon, max_probes, seed).max_rel_error


def check_dense(epsilon: float = 1e-3, seed: int = 0) -> GradCheckResult:
    """Single linear layer under a quadratic loss."""
    g = torch.Generator().manual_seed(seed)
    layer = nn.Linear(8, 4).double()
    x = torch.randn(5, 8, generator=g, dtype=torch.float64)
    y = torch.randn(5, 4, generator=g, dtype=torch.float64)
    return grad_check_detailed(layer, lambda m: ((m(x) - y) ** 2).mean(), epsilon, seed=seed)


def check_cnn(epsilon: float = 1e-3, seed: int = 0, size: int = 16, max_probes: int = 5000) -> GradCheckResult:
    """Default four-stage CNN on a ``size`` x ``size`` input with an MSE loss."""
    torch.manual_seed(seed)
    model = CoordCNN(CnnSpec(height=size, width=size, outputs=6)).double()
    # the zero-initialized head would hand zero gradient to every layer below it
    nn.init.normal_(model.out.weight, 0.0, 0.05)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 1, size, size, generator=g, dtype=torch.float64)
    y = torch.rand(2, 6, generator=g, dtype=torch.float64)
    return grad_check_detailed(model, lambda m: ((m(x) - y) ** 2).mean(), epsilon, max_probes, seed)


def check_transformer(epsilon: float = 1e-3, seed: int = 0, length: int = 8, max_probes: int = 5000) -> GradCheckResult:
    """Two-layer decoder on a length-``length`` sequence with target-slot cross-entropy."""
    torch.manual_seed(seed)
    spec = TransformerSpec(d_model=32, heads=4, layers=2, ff=64, max_len=length)
    model = DigitTransformer(spec).double()
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(0, spec.vocab_size, (2, length + 1), generator=g)
    stage = SymbolicStage(model, decimals=1)  # 3-token target slot
    return grad_check_detailed(model, lambda m: stage.loss(ids), epsilon, max_probes, seed)
