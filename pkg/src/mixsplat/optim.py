"""Adaptive-moment optimizer over named parameter groups.

Plain Adam with per-group learning rates; moment rows follow the scene
through densification (new primitives start with zero moments, pruned
rows are dropped).
"""

import numpy as np


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.steps = {}

    def _state(self, name, arr):
        if name not in self.m:
            self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)
            self.steps[name] = 0
        return self.m[name], self.v[name]

    def step(self, name, param, grad, lr):
        """In-place Adam update of one named tensor."""
        m, v = self._state(name, param)
        if m.shape != param.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, "
                             f"param has {param.shape}")
        self.steps[name] += 1
        t = self.steps[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return param

    def grow_rows(self, name, parent_rows=None, n_new=0):
        """Append state rows; fresh rows start at zero moments."""
        if name not in self.m:
            return
        n = len(parent_rows) if parent_rows is not None else n_new
        if n == 0:
            return
        pad = np.zeros((n,) + self.m[name].shape[1:])
        self.m[name] = np.concatenate([self.m[name], pad])
        self.v[name] = np.concatenate([self.v[name], pad.copy()])

    def prune_rows(self, name, keep_mask):
        if name in self.m:
            self.m[name] = self.m[name][keep_mask]
            self.v[name] = self.v[name][keep_mask]
