"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, no_grad


@dataclass
class GradCheckResult:
    checked: int = 0
    failures: list = field(default_factory=list)
    max_abs_err: float = 0.0

    @property
    def ok(self):
        return not self.failures


def check_gradients(fn, tensors, eps=1e-4, atol=1e-6, rtol=1e-3, max_entries=None, seed=0):
    """Compare ``d fn() / d t`` against central differences for each tensor.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``tensors``. An entry passes when ``|analytic - numeric| <= max(atol,
    rtol * max(|analytic|, |numeric|))``. With ``max_entries`` only a random
    subset of each tensor's entries is probed.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    result = GradCheckResult()
    with no_grad():
        for ti, t in enumerate(tensors):
            flat = t.values.flat  # writable even for non-contiguous arrays
            idx = np.arange(t.values.size)
            if max_entries is not None and t.values.size > max_entries:
                idx = rng.choice(t.values.size, size=max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                ana = analytic[ti].flat[i]
                err = abs(ana - num)
                result.checked += 1
                result.max_abs_err = max(result.max_abs_err, err)
                if err > max(atol, rtol * max(abs(ana), abs(num))):
                    result.failures.append((t.name or f"tensor{ti}", int(i), float(ana), float(num)))
    return result


def as_param(values, name=None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)
