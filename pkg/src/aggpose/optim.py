"""AdamW with decoupled weight decay.

The decay is applied to the parameter directly, never through the moment
estimates, so a zero gradient with nonzero decay still shrinks the
parameter by lr * decay per step.  Frozen parameters (trainable=False)
are skipped entirely: no moments, no decay.
"""

from __future__ import annotations

import numpy as np


def adamw_update(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One update; mutates and returns (param, m, v) for step index t >= 1."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param = param - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)
    return param, m, v


class AdamW:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, lr=None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in self.named_params:
            if not p.trainable:
                continue
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[name], self.v[name] = adamw_update(
                p.data,
                grad.astype(p.data.dtype, copy=False),
                self.m[name],
                self.v[name],
                self.t,
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                self.weight_decay,
            )

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def grad_norms(self) -> dict:
        return {
            name: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0
            for name, p in self.named_params
        }

    def state_arrays(self) -> dict:
        """Moment estimates plus the step counter, for checkpointing."""
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        out["t"] = np.array([float(self.t)])
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for name in self.m:
            self.m[name] = arrays[f"m/{name}"].astype(self.m[name].dtype).reshape(self.m[name].shape)
            self.v[name] = arrays[f"v/{name}"].astype(self.v[name].dtype).reshape(self.v[name].shape)
        self.t = int(arrays["t"][0])
