"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import functional as F
from .tensor import Tape, Tensor, backward, get_default_dtype, no_grad


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    excluded: list = field(default_factory=list)
    worst: Optional[tuple] = None

    @property
    def pass_(self) -> bool:
        return self.passed


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-3,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare backward() against central differences for every input coordinate.

    A non-scalar output is reduced with a fixed random projection so every
    output element contributes. Coordinates whose +eps and -eps evaluations
    take different relu/max-pool branches are reported in ``excluded``
    instead of counted. ``max_coords`` subsamples coordinates per input.
    """
    if get_default_dtype() != np.float64:
        raise RuntimeError("gradcheck requires 64-bit mode (wrap in precision('float64'))")
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    rng = np.random.default_rng(seed)
    proj = {}

    def scalar_out():
        out = f(*inputs)
        if out.size == 1:
            return F.reshape(out, ())
        if "w" not in proj:
            proj["w"] = rng.standard_normal(out.shape)
        return F.sum_(F.mul(out, proj["w"]))

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        loss = scalar_out()
        backward(loss, inputs)
    analytic = [t.grad.copy() for t in inputs]

    def probe(t, flat_i, delta):
        orig = t.data.flat[flat_i]
        t.data.flat[flat_i] = orig + delta
        try:
            with F.kink_probe() as kinks:
                with no_grad():
                    val = float(scalar_out().data)
        finally:
            t.data.flat[flat_i] = orig
        return val, kinks

    worst_err, worst = 0.0, None
    excluded, checked = [], 0
    for k, t in enumerate(inputs):
        idx = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            idx = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        for i in idx:
            fp, kp = probe(t, i, eps)
            fm, km = probe(t, i, -eps)
            if kp != km:
                excluded.append((k, int(i)))
                continue
            num = (fp - fm) / (2 * eps)
            err = float(rel_err(num, analytic[k].flat[i]))
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (k, int(i), float(analytic[k].flat[i]), num)
    for t in inputs:
        t.grad = None
    return GradcheckReport(worst_err, worst_err < tol, checked, excluded, worst)
