"""Finite-difference verification of the reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, backward as _backward


@dataclass
class OpGraph:
    """A rebuildable scalar computation over named parameter tensors.

    ``build`` must construct the graph from the current contents of
    ``parameters`` every time it is called, so perturbing a parameter's data
    in place and rebuilding gives the perturbed loss.
    """

    build: Callable[[], Tensor]
    parameters: dict[str, Tensor]

    def evaluate(self) -> Tensor:
        return self.build()


def backward(graph: OpGraph, loss: Tensor | None = None) -> dict[str, np.ndarray]:
    """Gradients of the graph's scalar output w.r.t. every named parameter."""
    for p in graph.parameters.values():
        p.grad = None
    loss = graph.evaluate() if loss is None else loss
    _backward(loss)
    return {name: (np.zeros_like(p.data) if p.grad is None else p.grad)
            for name, p in graph.parameters.items()}


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    checked: dict[str, int] = field(default_factory=dict)
    kinks: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self) -> list[str]:
        out = [f"{name}\t{err:.3e}\t{self.checked.get(name, 0)}" for name, err in self.errors.items()]
        out.append(f"max\t{self.max_error:.3e}\t{'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Max abs difference scaled by the larger gradient magnitude of the two."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def finite_diff_check(graph: OpGraph, tolerance: float = 1e-4, eps: float = 1e-4,
                      max_entries: int | None = 6, seed: int = 0,
                      corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None,
                      kink_retries: int = 0) -> GradCheckReport:
    """Compare ``backward`` against central differences.

    At most ``max_entries`` entries per parameter are probed, chosen by a
    seeded generator (all entries when ``None``). ``corrupt`` lets tests
    tamper with the analytic gradient to confirm the check fails.

    With ``kink_retries > 0`` a probe whose forward and backward one-sided
    differences disagree by more than ``tolerance`` (relative) is treated as
    straddling a non-differentiable point (a relu or max switch) and replaced
    by another entry, up to that many times per parameter. The analytic
    gradient plays no part in that decision.
    """
    rng = np.random.default_rng(seed)
    grads = backward(graph)
    base = float(graph.evaluate().data) if kink_retries else 0.0
    errors, checked, kinks = {}, {}, {}
    for name, p in graph.parameters.items():
        g = grads[name]
        if corrupt is not None:
            g = corrupt(name, g.copy())
        n = p.data.size
        if max_entries is None or n <= max_entries:
            order = np.arange(n)
            want = n
        else:
            order = rng.permutation(n)
            want = max_entries
        flat = p.data.reshape(-1)
        picks, numeric = [], []
        skipped = 0
        for i in order:
            if len(picks) == want:
                break
            orig = flat[i]
            flat[i] = orig + eps
            up = float(graph.evaluate().data)
            flat[i] = orig - eps
            down = float(graph.evaluate().data)
            flat[i] = orig
            if kink_retries and skipped < kink_retries:
                fw, bw = (up - base) / eps, (base - down) / eps
                if abs(fw - bw) > tolerance * max(abs(fw), abs(bw), 1e-10):
                    skipped += 1
                    continue
            picks.append(i)
            numeric.append((up - down) / (2.0 * eps))
        picks = np.array(picks, dtype=int)
        errors[name] = relative_error(g.reshape(-1)[picks], np.array(numeric))
        checked[name] = len(picks)
        kinks[name] = skipped
    return GradCheckReport(errors, tolerance, checked, kinks)
