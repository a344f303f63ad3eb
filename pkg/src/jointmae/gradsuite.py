"""Finite-difference gradient suite over every differentiable op and the full model stack."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dims import TINY
from .engine import (
    Tensor,
    add,
    concat,
    conv2d_3x3_s2,
    gather_rows,
    gelu,
    grad_check,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    max_,
    mean,
    mul,
    reshape,
    split,
    squared_error,
    sub,
    sum_,
    swapaxes,
    transpose,
)
from .geometry import sample_view, soft_project
from .losses import chamfer_l2
from .pipeline.config import DatasetSpec, RunConfig
from .pipeline.data import make_shape
from .pipeline.model import forward, init_model, make_batch

# Ops built on exp / tanh / softmax get the looser tolerance.
TOL_SMOOTH = 1e-5
TOL_EXP = 1e-4


@dataclass
class CaseResult:
    name: str
    seed: int
    tolerance: float
    max_error: float
    passed: bool


def _p(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _target(rng, *shape):
    return Tensor(rng.normal(size=shape))


def case_linear(rng):
    x, w, b = _p(rng, 5, 4), _p(rng, 4, 3), _p(rng, 3)
    t = _target(rng, 5, 3)
    return (lambda p: squared_error(linear(p["x"], p["w"], p["b"]), t)), {"x": x, "w": w, "b": b}, TOL_SMOOTH


def case_elementwise(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4)
    t = _target(rng, 3, 4)
    return (lambda p: squared_error(sub(mul(add(p["a"], p["b"]), p["a"]), mul(p["b"], 0.5)), t)), \
        {"a": a, "b": b}, TOL_SMOOTH


def case_matmul_shapes(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    t = _target(rng, 5, 2, 3)

    def build(p):
        y = matmul(p["a"], p["b"])                                  # (2, 3, 5)
        y = reshape(transpose(y, (2, 0, 1)), (5, 2, 3))
        left, right = split(y, [1, 2], axis=2)
        return squared_error(concat([right, left], axis=2), t)

    return build, {"a": a, "b": b}, TOL_SMOOTH


def case_gather_reduce(rng):
    x = _p(rng, 6, 3)
    idx = rng.integers(0, 6, size=(4, 2))
    return (lambda p: add(sum_(mul(gather_rows(p["x"], idx), 1.5)), mean(max_(p["x"], axis=1)))), {"x": x}, TOL_SMOOTH


def case_conv(rng):
    x, w, b = _p(rng, 2, 8, 6, 3), _p(rng, 3, 3, 3, 4, scale=0.3), _p(rng, 4)
    t = _target(rng, 2, 4, 3, 4)
    return (lambda p: squared_error(conv2d_3x3_s2(p["x"], p["w"], p["b"]), t)), {"x": x, "w": w, "b": b}, TOL_SMOOTH


def case_gelu_norm(rng):
    x, g, b = _p(rng, 4, 6), _p(rng, 6), _p(rng, 6)
    t = _target(rng, 4, 6)
    return (lambda p: squared_error(gelu(layer_norm(p["x"], p["g"], p["b"])), t)), {"x": x, "g": g, "b": b}, TOL_EXP


def case_attention(rng):
    """Single-head masked attention block with a residual."""
    x, wq, wk, wv = _p(rng, 5, 4), _p(rng, 4, 4), _p(rng, 4, 4), _p(rng, 4, 4)
    valid = rng.uniform(size=(5, 5)) < 0.6
    valid[np.arange(5), np.arange(5)] = True
    mask = np.where(valid, 0.0, -1e9)
    t = _target(rng, 5, 4)

    def build(p):
        q, k, v = matmul(p["x"], p["wq"]), matmul(p["x"], p["wk"]), matmul(p["x"], p["wv"])
        w = masked_softmax(mul(matmul(q, swapaxes(k, 0, 1)), 0.5), mask)
        return squared_error(add(p["x"], matmul(w, v)), t)

    return build, {"x": x, "wq": wq, "wk": wk, "wv": wv}, TOL_EXP


def case_soft_project(rng):
    pts = Tensor(rng.uniform(-0.8, 0.8, size=(40, 3)), requires_grad=True)
    view = sample_view(int(rng.integers(1 << 30)), 32, 32)
    weights = rng.uniform(size=(32, 32))
    return (lambda p: sum_(mul(soft_project(p["pts"], view, sigma=1.0), weights))), {"pts": pts}, TOL_EXP


def case_chamfer(rng):
    a, b = _p(rng, 12, 3), _p(rng, 9, 3)
    return (lambda p: chamfer_l2(p["a"], p["b"])), {"a": a, "b": b}, TOL_SMOOTH


def case_full_stack(rng, max_entries: int = 2):
    """Embedding, encoder, decoder, heads and all three losses at tiny widths."""
    cfg = RunConfig(dims=TINY, dataset=DatasetSpec(), cross_views=2, epochs=1, warmup_epochs=0.0,
                    seed=int(rng.integers(1 << 30)))
    clouds = np.stack([make_shape(k, TINY.n_points, cfg.dataset, int(rng.integers(1 << 30)))[0]
                       for k in ("sphere", "torus")])
    batch = make_batch(clouds, [0, 1], 0, cfg)
    tree = init_model(TINY, int(rng.integers(1 << 30)))
    # perturb the zero-initialized biases / tables so every path carries signal
    for _, t in tree.items():
        t.data = t.data + rng.normal(0.0, 0.05, size=t.shape)
    params = dict(tree.trainable())
    return (lambda p: forward(tree, batch, cfg).loss.tensor), params, TOL_EXP, max_entries


OP_CASES: dict[str, Callable] = {
    "linear": case_linear,
    "elementwise": case_elementwise,
    "matmul/reshape/transpose/split/concat": case_matmul_shapes,
    "gather/sum/mean/max": case_gather_reduce,
    "conv2d_3x3_s2": case_conv,
    "gelu/layer_norm": case_gelu_norm,
    "masked attention": case_attention,
    "soft_project": case_soft_project,
    "chamfer_l2": case_chamfer,
}


def run_suite(seeds=range(10), include_stack: bool = True, log: Callable[[str], None] | None = None) -> list[CaseResult]:
    say = log or (lambda s: None)
    cases = dict(OP_CASES)
    if include_stack:
        cases["full stack"] = case_full_stack
    results = []
    t0 = time.perf_counter()
    for name, make in cases.items():
        worst = 0.0
        for seed in seeds:
            built = make(np.random.default_rng([seed, len(name)]))
            build, params, tol = built[:3]
            max_entries = built[3] if len(built) > 3 else None
            rep = grad_check(build, params, tolerance=tol, max_entries=max_entries, seed=seed)
            results.append(CaseResult(name, seed, tol, rep.max_error, rep.passed))
            worst = max(worst, rep.max_error)
        ok = all(r.passed for r in results if r.name == name)
        say(f"{'ok  ' if ok else 'FAIL'} {name:40s} max rel err {worst:.2e} (tol {tol:.0e}, {len(seeds)} seeds)")
    say(f"gradient suite finished in {time.perf_counter() - t0:.1f}s")
    return results
