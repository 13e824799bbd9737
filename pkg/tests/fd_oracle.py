"""Central finite differences, independent of the tape."""

import numpy as np


def central_difference(f, arr: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """d f() / d arr, perturbing ``arr`` in place one entry at a time."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def param_kind(name: str) -> str:
    if name == "embedding":
        return "embedding"
    if ".attn" in name:
        return "attention"
    if ".gate" in name:
        return "gate"
    if ".expert" in name or ".ffn." in name:
        return "expert"
    return "layernorm"


def sampled_model_gradients(store, loss, rng, per_tensor: int = 2, eps: float = 1e-6):
    """Compare tape gradients (already in ``.grad``) with central differences.

    ``loss()`` must evaluate the scalar loss without recording.  Returns
    {kind: (analytic, numeric)} over a few random entries of every tensor.
    """
    out: dict[str, tuple[list, list]] = {}
    for name, t in store:
        flat = t.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + eps
            hi = loss()
            flat[idx] = old - eps
            lo = loss()
            flat[idx] = old
            a, n = out.setdefault(param_kind(name), ([], []))
            a.append(t.grad.reshape(-1)[idx])
            n.append((hi - lo) / (2 * eps))
    return {k: (np.array(a), np.array(n)) for k, (a, n) in out.items()}
