"""Pre-training loop with CSV logging, checkpoints and resume."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..engine import (
    NonFiniteError,
    OptimizerState,
    ParameterTree,
    Schedule,
    adamw_step,
    backward,
    checkpoint,
    clip_grad_norm,
    lr_at,
)
from .config import RunConfig
from .data import stack, synth_dataset
from .model import forward, init_model, make_batch

LOG_FIELDS = ("epoch", "l3d", "l2d", "lcross", "total", "lr")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    rows: list


def schedule_for(cfg: RunConfig) -> Schedule:
    return Schedule(cfg.lr, cfg.min_lr, cfg.warmup_epochs, cfg.epochs)


def save_checkpoint(path, tree: ParameterTree, opt: OptimizerState, cfg: RunConfig, epoch: int) -> Path:
    arrays = {f"params/{k}": v for k, v in tree.state().items()}
    arrays.update(opt.arrays())
    frozen = sorted(k for k, t in tree.items() if not t.requires_grad)
    # the output directory is left out so that identical runs give identical bytes wherever they are written
    config = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    meta = {"config": config, "epoch": epoch, "optimizer": opt.meta(), "seed": tree.seed, "frozen": frozen}
    return checkpoint.save(path, arrays, meta)


def load_checkpoint(path) -> tuple[ParameterTree, OptimizerState, RunConfig, int]:
    arrays, meta = checkpoint.load(path)
    if "config" not in meta:
        raise checkpoint.CheckpointError(f"{path}: no run configuration in checkpoint")
    cfg = RunConfig.from_dict(dict(meta["config"], out_dir=str(Path(path).parent)))
    tree = init_model(cfg.dims, meta.get("seed", cfg.seed), cfg.frozen_pe2d)
    tree.load_state({k[len("params/"):]: v for k, v in arrays.items() if k.startswith("params/")})
    opt = OptimizerState.restore(arrays, meta["optimizer"]) if "optimizer" in meta else None
    return tree, opt, cfg, int(meta.get("epoch", 0))


def _write_log(path: Path, rows: list) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS})
    tmp.replace(path)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def pretrain(cfg: RunConfig, resume=None, log: Callable[[str], None] | None = None,
             data=None) -> TrainResult:
    """Train from scratch (or from ``resume``) to ``cfg.epochs``.

    Writes ``log.csv``, ``epoch_XXXX.jmae`` every ``checkpoint_every`` epochs
    and ``last.jmae`` into ``cfg.out_dir``. A non-finite loss aborts the run
    and leaves the last checkpoint untouched.
    """
    say = log or (lambda s: None)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.csv"
    if data is None:
        train, _ = synth_dataset(cfg.dataset, cfg.data_seed, cfg.dims.n_points)
        data = stack(train)[0]
    clouds = np.asarray(data)

    rows: list = []
    start = 0
    if resume is not None:
        tree, opt, saved, start = load_checkpoint(resume)
        if saved.dims != cfg.dims:
            raise checkpoint.CheckpointError(f"{resume}: checkpoint dims differ from the configuration")
        if log_path.exists():
            rows = [r for r in read_log(log_path) if r["epoch"] <= start]
    else:
        tree = init_model(cfg.dims, cfg.seed, cfg.frozen_pe2d)
        opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps)
    sched = schedule_for(cfg)
    n = len(clouds)
    iters = math.ceil(n / cfg.batch_size)
    last = out / "last.jmae"

    for epoch in range(start + 1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        for it in range(iters):
            idx = order[it * cfg.batch_size : (it + 1) * cfg.batch_size]
            lr = lr_at(epoch - 1 + it / iters, sched)
            batch = make_batch(clouds, idx, epoch, cfg)
            tree.zero_grad()
            try:
                res = forward(tree, batch, cfg)
                if not math.isfinite(res.loss.total):
                    raise NonFiniteError("overall_loss: non-finite total")
                backward(res.loss.tensor)
            except NonFiniteError as exc:
                raise TrainingAborted(f"epoch {epoch} iteration {it}: {exc}; last good checkpoint kept at "
                                      f"{last if last.exists() else 'none'}") from exc
            if cfg.grad_clip:
                clip_grad_norm(tree, cfg.grad_clip)
            adamw_step(tree, opt, lr)
            sums += [res.loss.l3d, res.loss.l2d, res.loss.lcross]
        l3, l2, lc = (float(x) for x in sums / iters)
        row = {"epoch": epoch, "l3d": l3, "l2d": l2, "lcross": lc, "total": l3 + l2 + lc,
               "lr": lr_at(epoch, sched)}
        rows.append(row)
        _write_log(log_path, rows)
        say(f"epoch {epoch:4d}  l3d {l3:.5f}  l2d {l2:.5f}  lcross {lc:.5f}  total {row['total']:.5f}")
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            save_checkpoint(out / f"epoch_{epoch:04d}.jmae", tree, opt, cfg, epoch)
            save_checkpoint(last, tree, opt, cfg, epoch)
    cfg.save(out / "config.json")
    return TrainResult(last, log_path, rows)
