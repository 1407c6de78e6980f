"""Shared oracles for the test suite."""
import numpy as np
import torch


def finite_difference_grad(fn, args, wrt: int, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar fn w.r.t. args[wrt] (float64)."""
    base = [np.asarray(a, dtype=np.float64).copy() for a in args]
    x = base[wrt]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = float(fn(*base))
        x[idx] = orig - step
        lo = float(fn(*base))
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
        it.iternext()
    return grad


def analytic_grad(fn, args, wrt: int) -> np.ndarray:
    """Autograd gradient of scalar fn w.r.t. args[wrt] (float64)."""
    tensors = [torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in args]
    tensors[wrt] = tensors[wrt].clone().requires_grad_(True)
    out = fn(*tensors)
    out.backward()
    return tensors[wrt].grad.numpy()


def relative_grad_error(fn, args, wrt: int, step: float = 1e-4) -> float:
    num = finite_difference_grad(fn, args, wrt, step)
    ana = analytic_grad(fn, args, wrt)
    denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
    return float(np.linalg.norm(num - ana) / denom)
