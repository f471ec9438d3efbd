"""Central finite-difference verification of backward passes."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def finite_diff_check(fn, inputs, eps: float = 1e-5, max_entries: int = None):
    """Compare backward gradients of the scalar fn(*inputs) against central
    differences, per input. Returns {name: max_rel_error} plus "__max__".

    fn must be deterministic; inputs are Tensors (flagged requires_grad here).
    Relative error is |fd - an| / max(|fd|, |an|, 1).
    """
    for i, t in enumerate(inputs):
        t.requires_grad = True
        t.grad = None
        if t.name is None:
            t.name = f"input{i}"
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("finite_diff_check requires a scalar-valued fn")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    report = {}
    worst = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        idx = range(n) if (max_entries is None or n <= max_entries) else \
            np.linspace(0, n - 1, max_entries).astype(int)
        err = 0.0
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(fn(*inputs).data)
            flat[k] = orig - eps
            fm = float(fn(*inputs).data)
            flat[k] = orig
            fd = (fp - fm) / (2 * eps)
            an_k = an.reshape(-1)[k]
            scale = max(abs(fd), abs(an_k), 1.0)
            err = max(err, abs(fd - an_k) / scale)
        report[t.name] = err
        worst = max(worst, err)
    report["__max__"] = worst
    return report
