"""AdamW with decoupled weight decay and global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale every gradient by max_norm / norm when the global norm exceeds max_norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class AdamW:
    """Adam moments with weight decay applied directly to the parameters.

    Parameters are replaced with new read-only arrays each step; a parameter
    with no gradient this step is treated as having a zero gradient (so it
    still decays and its moments still advance).
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        bad = [k for k, p in params.items() if not p.requires_grad]
        if bad:
            raise ValueError(f"optimizer given frozen parameters: {bad[:3]}")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        unknown = set(grads) - set(self.params)
        if unknown:
            raise KeyError(f"gradients for parameters outside the optimizer: {sorted(unknown)[:3]}")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update
            new.flags.writeable = False
            p.data = new
