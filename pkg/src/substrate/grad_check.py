#!/usr/bin/env python3
"""
Finite-difference gradient checker
Compares autograd gradients of a scalar function against central differences,
in double precision.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import torch
import torch.nn as nn
from torch.func import functional_call

from common.errors import GradCheckError

DEFAULT_EPS = 1e-4
DEFAULT_TOL = 1e-3
ERROR_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: List[float] = field(default_factory=list)
    tol: float = DEFAULT_TOL
    eps: float = DEFAULT_EPS

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def as_dict(self) -> Dict[str, object]:
        return {
            'max_rel_error': self.max_rel_error,
            'per_input': list(self.per_input),
            'tol': self.tol,
            'eps': self.eps,
            'passed': self.passed,
        }


def _scalar(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    out = fn(*inputs)
    if not isinstance(out, torch.Tensor) or out.numel() != 1:
        raise GradCheckError("grad_check needs a scalar-valued function")
    if not torch.isfinite(out).all():
        raise GradCheckError(f"function returned a non-finite value: {out.item()}")
    return out.reshape(())


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Max relative error between analytic and central-difference gradients.

    Relative error per input is ||g_a - g_n||_inf / max(||g_a||_inf, ||g_n||_inf, 1e-8).
    Inputs are copied to float64 leaves; `fn` must be deterministic (no dropout, per-sample normalisation).
    """
    leaves = [x.detach().clone().to(torch.float64).requires_grad_(True) for x in inputs]
    out = _scalar(fn, leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g.detach() for x, g in zip(leaves, grads)]

    errors = []
    with torch.no_grad():
        for x, g_a in zip(leaves, analytic):
            flat = x.view(-1)
            g_n = torch.zeros_like(flat)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                f_plus = _scalar(fn, leaves).item()
                flat[j] = orig - eps
                f_minus = _scalar(fn, leaves).item()
                flat[j] = orig
                g_n[j] = (f_plus - f_minus) / (2.0 * eps)
            g_n = g_n.view_as(x)
            scale = max(g_a.abs().max().item(), g_n.abs().max().item(), ERROR_FLOOR)
            errors.append((g_a - g_n).abs().max().item() / scale)

    return GradCheckReport(max_rel_error=max(errors) if errors else 0.0,
                           per_input=errors, tol=tol, eps=eps)


def module_param_fn(module: nn.Module, param_names: Sequence[str],
                    reduce: Callable[[torch.Tensor], torch.Tensor],
                    *args: torch.Tensor) -> Callable[..., torch.Tensor]:
    """Wrap a module so the named parameters become grad_check inputs"""
    def fn(*params: torch.Tensor) -> torch.Tensor:
        overrides = dict(zip(param_names, params))
        return reduce(functional_call(module, overrides, args))
    return fn


def frozen_double(module: nn.Module) -> nn.Module:
    """Cast to float64 in place and switch to eval mode"""
    return module.double().eval()
