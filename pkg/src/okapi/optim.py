"""AdamW with decoupled weight decay over a dict of named arrays."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay_filter=None):
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        # biases and norm gains are not decayed by default
        self.decay_filter = decay_filter or (lambda name, arr: arr.ndim >= 2)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """Update ``params`` in place. Names absent from ``grads`` are left untouched."""
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay and self.decay_filter(name, p):
                p -= lr * self.weight_decay * p
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


def value_and_grad(params: dict[str, np.ndarray], loss_fn, trainable=None):
    """Evaluate ``loss_fn(tensors)`` and return (loss, aux, grads for trainable names).

    ``loss_fn`` returns either a scalar Tensor or ``(Tensor, aux)``.
    """
    from .autodiff import Tensor

    tensors = {k: Tensor(v, name=k) for k, v in params.items()}
    out = loss_fn(tensors)
    loss, aux = out if isinstance(out, tuple) else (out, None)
    loss.backward()
    names = params.keys() if trainable is None else trainable
    grads = {k: tensors[k].grad for k in names}
    return loss.item(), aux, grads
