"""Central-finite-difference checks against autograd.

The comparison statistic is the aggregated vector-norm relative error
||g_fd - g_auto|| / max(||g_fd||, ||g_auto||), which tolerates the odd
relu/pool kink without letting a systematically wrong gradient through.
Checks should run on float64 modules; float32 FD noise swamps tight bounds.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

DEFAULT_STEP = 1e-5


def flatten_module_params(module: nn.Module) -> np.ndarray:
    return np.concatenate([p.detach().numpy().ravel() for _, p in
                           sorted(module.named_parameters(), key=lambda kv: kv[0])])


def _param_list(module: nn.Module):
    return [p for _, p in sorted(module.named_parameters(), key=lambda kv: kv[0])]


def analytic_module_gradient(loss_fn, module: nn.Module) -> np.ndarray:
    """Autograd gradient of loss_fn() w.r.t. all module parameters, flattened."""
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    parts = []
    for p in _param_list(module):
        g = p.grad
        parts.append(np.zeros(p.numel()) if g is None else g.detach().numpy().ravel())
    module.zero_grad()
    return np.concatenate(parts)


def numeric_module_gradient(loss_fn, module: nn.Module,
                            step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences over every parameter coordinate."""
    grads = []
    with torch.no_grad():
        for p in _param_list(module):
            flat = p.view(-1)
            g = np.empty(flat.shape[0])
            for i in range(flat.shape[0]):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                g[i] = (up - down) / (2.0 * step)
            grads.append(g)
    return np.concatenate(grads)


def analytic_tensor_gradient(loss_fn, x: torch.Tensor) -> np.ndarray:
    if x.grad is not None:
        x.grad = None
    loss = loss_fn(x)
    loss.backward()
    g = x.grad.detach().numpy().ravel().copy()
    x.grad = None
    return g


def numeric_tensor_gradient(loss_fn, x: torch.Tensor,
                            step: float = DEFAULT_STEP) -> np.ndarray:
    flat = x.detach().view(-1)
    g = np.empty(flat.shape[0])
    with torch.no_grad():
        for i in range(flat.shape[0]):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(loss_fn(x))
            flat[i] = orig - step
            down = float(loss_fn(x))
            flat[i] = orig
            g[i] = (up - down) / (2.0 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-30)
    return float(np.linalg.norm(a - b)) / scale


def check_module_gradients(loss_fn, module: nn.Module,
                           step: float = DEFAULT_STEP) -> float:
    """Relative error between autograd and FD for a module's parameters."""
    auto = analytic_module_gradient(loss_fn, module)
    fd = numeric_module_gradient(loss_fn, module, step)
    return relative_error(auto, fd)


def check_tensor_gradients(loss_fn, x: torch.Tensor,
                           step: float = DEFAULT_STEP) -> float:
    """Relative error between autograd and FD for a leaf tensor input."""
    if not x.requires_grad:
        raise ValueError("tensor must require grad")
    auto = analytic_tensor_gradient(loss_fn, x)
    fd = numeric_tensor_gradient(loss_fn, x, step)
    return relative_error(auto, fd)
