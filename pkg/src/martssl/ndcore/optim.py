"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

import ctypes
import ctypes.util

import numpy as np

from .autodiff import Node

_ALLOCATOR_TUNED = False


def tune_allocator() -> None:
    """Keep large freed blocks on the heap instead of unmapping them.

    Training allocates and frees the same few-megabyte activation buffers every
    step; with glibc defaults those round-trip through mmap and the step pays
    page faults. Idempotent, best effort, no-op off glibc.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        libc.mallopt(-3, 1 << 30)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)   # M_TRIM_THRESHOLD
    except (OSError, AttributeError, TypeError):
        pass


class AdamW:
    """Decoupled-weight-decay Adam.

    The decay shrinks each parameter by (1 - lr * weight_decay) before the
    bias-corrected moment update, so a step with zero gradient and nonzero
    decay scales the parameter norm by exactly that factor.
    """

    def __init__(self, params: dict[str, Node], lr=1e-3, weight_decay=1e-4,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.second_moment = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay:
                p.value *= 1.0 - self.lr * self.weight_decay
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
