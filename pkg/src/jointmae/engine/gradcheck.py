"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, selection_log


class NondeterministicGraph(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    straddled: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def lines(self) -> list[str]:
        out = []
        for name, e in self.errors.items():
            skip = self.straddled.get(name, 0)
            note = f", {skip} straddling a selection switch" if skip else ""
            out.append(f"{'ok  ' if e <= self.tolerance else 'FAIL'} {name}: max rel err {e:.2e} over "
                       f"{self.checked[name]} entries{note}")
        return out


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    build: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-5,
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward gradients of ``build(params)`` with central differences.

    The error of one entry is ``max(|analytic - numeric| - r, 0) / max(|analytic|, |numeric|, s)``
    where ``s`` is 1e-3 times the largest analytic gradient magnitude over the
    whole parameter (floored at 1e-10) and ``r = 32 eps max(|loss|, 1) / step``
    bounds the round-off of a central difference, so entries whose true
    gradient is zero do not register as failures. The report keeps the max
    per parameter. With ``max_entries`` set, that many entries per parameter
    are sampled.

    Ops that pick among inputs (max, nearest neighbour) log their choices.
    If a perturbed evaluation makes different choices than the unperturbed
    one, the stencil straddles a kink where the loss is not differentiable;
    such entries are counted in ``straddled`` and left out of the error.
    """
    with selection_log() as base_sel:
        first = float(build(params).data)
    loss = build(params)
    if float(loss.data) != first:
        raise NondeterministicGraph(f"builder gave {first!r} then {float(loss.data)!r}")
    for p in params.values():
        p.zero_grad()
    backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}

    roundoff = 32 * np.finfo(float).eps * max(abs(first), 1.0) / step
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            entries = np.arange(flat.size)
        num = np.empty(len(entries))
        smooth = np.ones(len(entries), dtype=bool)
        for j, i in enumerate(entries):
            orig = flat[i]
            flat[i] = orig + step
            with selection_log() as sel_p:
                fp = float(build(params).data)
            flat[i] = orig - step
            with selection_log() as sel_m:
                fm = float(build(params).data)
            flat[i] = orig
            num[j] = (fp - fm) / (2 * step)
            smooth[j] = _same(sel_p, base_sel) and _same(sel_m, base_sel)
        ana = analytic[name].reshape(-1)[entries]
        scale = max(1e-3 * np.abs(analytic[name]).max(initial=0.0), 1e-10)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), scale)
        err = np.maximum(np.abs(ana - num) - roundoff, 0.0) / denom
        err = err[smooth]
        report.errors[name] = float(err.max()) if len(err) else 0.0
        report.checked[name] = int(smooth.sum())
        report.straddled[name] = int((~smooth).sum())
    return report
