import numpy as np


def central_diff(f, arr, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def rel_error(analytic, numeric, floor=1e-6):
    """Largest entrywise error relative to the tensor's largest gradient magnitude.

    Tensors whose gradient is identically zero in exact arithmetic (e.g. key
    biases under softmax) only carry finite-difference noise, so the scale is
    floored at ``floor``.
    """
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)
