"""AdamW with bias correction and decoupled, per-group weight decay."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Standard AdamW over a name -> Tensor parameter dict.

    Weight decay is selected per parameter by longest matching key prefix in
    `weight_decay_map`; parameters with no matching prefix use `weight_decay`.
    Decay is decoupled: it applies on every step() even when a parameter's
    gradient is exactly zero.

    Moments are kept in the parameter dtype (float32 in practice) so that a
    save/load round trip reproduces the in-memory state bit for bit.
    """

    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 weight_decay_map: dict | None = None):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.step_count = 0
        self._decay = {}
        wd_map = weight_decay_map or {}
        for name in self.params:
            best = None
            for prefix in wd_map:
                if name.startswith(prefix) and (best is None or len(prefix) > len(best)):
                    best = prefix
            self._decay[name] = float(wd_map[best]) if best is not None else float(weight_decay)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"parameter '{name}' has no gradient at step()")
            dt = p.data.dtype
            g = np.asarray(g, dtype=dt)
            m = self.m[name]
            v = self.v[name]
            m *= dt.type(self.beta1)
            m += dt.type(1.0 - self.beta1) * g
            v *= dt.type(self.beta2)
            v += dt.type(1.0 - self.beta2) * (g * g)
            mhat = m / dt.type(bc1)
            vhat = v / dt.type(bc2)
            upd = dt.type(self.lr) * mhat / (np.sqrt(vhat) + dt.type(self.eps))
            wd = self._decay[name]
            if wd:
                upd = upd + dt.type(self.lr * wd) * p.data
            p.data = p.data - upd

    # -- checkpoint participation ------------------------------------------

    def state_arrays(self) -> dict:
        """Moment estimates keyed for checkpointing. step_count rides along
        as a length-1 array so the file format stays arrays-only."""
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        out["opt.step"] = np.array([float(self.step_count)], dtype=np.float32)
        return out

    def load_state_arrays(self, arrays: dict):
        for name, p in self.params.items():
            self.m[name] = arrays[f"opt.m.{name}"].astype(p.data.dtype).copy()
            self.v[name] = arrays[f"opt.v.{name}"].astype(p.data.dtype).copy()
        self.step_count = int(arrays["opt.step"][0])
