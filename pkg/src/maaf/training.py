"""Batch-classification loss, batching, SGD with momentum, schedules, training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, backward
from .autodiff import functional as F
from .checkpoint import Checkpoint
from .text_encoder import tokenize

log = logging.getLogger(__name__)

SCHEDULES = ("standard", "half", "half+warmup5000")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr_image: float = 0.001
    lr_other: float = 0.01
    momentum: float = 0.9
    decay_steps: int = 2000
    max_steps: int = 6000
    schedule: str = "standard"
    warmup_steps: int = 5000
    per_category_batching: bool = False
    projections_in_image_group: bool = False
    seed: int = 0
    log_every: int = 50
    eval_interval: int = 0
    eval_queries: int = 200
    precision: str = "float32"

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.decay_steps < 1 or self.max_steps < 0:
            raise ValueError("decay_steps must be >= 1 and max_steps >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")


class TrainingDiverged(RuntimeError):
    pass


def batch_loss(queries: Tensor, targets: Tensor) -> Tensor:
    """Mean over i of -log softmax_j(q_i . t_j)[i] on the scaled embeddings."""
    if queries.shape != targets.shape or queries.ndim != 2:
        raise ShapeError("batch_loss", queries.shape, targets.shape)
    n = queries.shape[0]
    if n < 2:
        raise ShapeError("batch_loss", queries.shape, detail="need at least two pairs")
    logits = F.matmul(queries, F.transpose(targets, (1, 0)))
    return F.cross_entropy(logits, np.arange(n))


def learning_rate(base: float, step: int, cfg: TrainConfig) -> float:
    """Step decay by 10x every ``decay_steps``; the alternative schedules halve the rate
    throughout ("half") or only for the first ``warmup_steps`` ("half+warmup5000")."""
    rate = base / 10 ** (step // cfg.decay_steps)
    if cfg.schedule == "half" or (cfg.schedule == "half+warmup5000" and step < cfg.warmup_steps):
        rate = rate / 2
    return rate


def is_image_param(name: str, cfg: TrainConfig) -> bool:
    if name.startswith("image.backbone."):
        return True
    return cfg.projections_in_image_group and name.startswith("image.proj_")


class SGD:
    """SGD with classical momentum: v <- mu v + g; p <- p - lr v."""

    def __init__(self, named_params: dict, momentum: float = 0.9):
        self.params = dict(named_params)
        self.momentum = momentum
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lrs: dict) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            buf = self.buffers[name]
            if self.momentum:
                buf *= p.dtype.type(self.momentum)
                buf += p.grad
            else:
                buf[...] = p.grad
            p.data -= p.dtype.type(lrs[name]) * buf


class BatchSampler:
    """Plain epochs (each record exactly once) or round-robin per-category batches."""

    def __init__(self, categories, batch_size: int, per_category: bool = False):
        self.n = len(categories)
        self.batch_size = batch_size
        cats = sorted({c for c in categories if c is not None})
        self.per_category = per_category and len(cats) > 1
        self.by_category = {c: [i for i, x in enumerate(categories) if x == c] for c in cats}
        self.t = 0
        self.epoch_batches: list = []
        self.cursor = 0
        self.cat_perm: dict = {c: [] for c in cats}
        self.cat_cursor: dict = {c: 0 for c in cats}

    def category_of_batch(self, t: int):
        cats = sorted(self.by_category)
        return cats[t % len(cats)]

    def next_batch(self, rng: np.random.Generator) -> np.ndarray:
        t = self.t
        self.t += 1
        if not self.per_category:
            if self.cursor >= len(self.epoch_batches):
                perm = rng.permutation(self.n)
                n_batches = max(1, math.ceil(self.n / self.batch_size))
                self.epoch_batches = [b.tolist() for b in np.array_split(perm, n_batches)]
                self.cursor = 0
            batch = self.epoch_batches[self.cursor]
            self.cursor += 1
            return np.asarray(batch)
        cat = self.category_of_batch(t)
        pool = self.by_category[cat]
        if len(pool) < self.batch_size:
            return rng.choice(pool, size=self.batch_size, replace=True)
        if self.cat_cursor[cat] + self.batch_size > len(self.cat_perm[cat]):
            self.cat_perm[cat] = [pool[i] for i in rng.permutation(len(pool))]
            self.cat_cursor[cat] = 0
        lo = self.cat_cursor[cat]
        self.cat_cursor[cat] = lo + self.batch_size
        return np.asarray(self.cat_perm[cat][lo:lo + self.batch_size])

    def state_dict(self) -> dict:
        return {"t": self.t, "epoch_batches": self.epoch_batches, "cursor": self.cursor,
                "cat_perm": self.cat_perm, "cat_cursor": self.cat_cursor}

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        self.epoch_batches = state["epoch_batches"]
        self.cursor = state["cursor"]
        self.cat_perm = {k: list(v) for k, v in state["cat_perm"].items()}
        self.cat_cursor = dict(state["cat_cursor"])


def make_batch(dataset, cfg: TrainConfig, rng: np.random.Generator, sampler: Optional[BatchSampler] = None):
    sampler = sampler or BatchSampler([r.category for r in dataset.records], cfg.batch_size,
                                      cfg.per_category_batching)
    return [dataset.records[i] for i in sampler.next_batch(rng)]


class Trainer:
    """Owns the optimizer, sampler and RNG; one ``train_step`` per minibatch.

    A single seeded PCG64 generator drives batch sampling and dropout, and its
    state is part of the checkpoint so a resumed run continues bit-exactly.
    """

    def __init__(self, model, dataset, vocab, cfg: TrainConfig, run_config: Optional[dict] = None):
        cfg.validate()
        self.model = model
        self.dataset = dataset
        self.vocab = vocab
        self.cfg = cfg
        self.run_config = run_config or {}
        self.rng = np.random.default_rng(cfg.seed)
        self.sampler = BatchSampler([r.category for r in dataset.records], cfg.batch_size,
                                    cfg.per_category_batching)
        params = dict(model.named_parameters())
        self.optimizer = SGD(params, cfg.momentum)
        self.groups = {n: ("image" if is_image_param(n, cfg) else "other") for n in params}
        self.step = 0
        self.history: list = []
        self._captions = {}

    def lrs(self, step: int) -> dict:
        base = {"image": self.cfg.lr_image, "other": self.cfg.lr_other}
        return {n: learning_rate(base[g], step, self.cfg) for n, g in self.groups.items()}

    def caption(self, text: str):
        tc = self._captions.get(text)
        if tc is None:
            tc = self._captions[text] = tokenize(text, self.vocab)
        return tc

    def batch_arrays(self, records):
        q = self.dataset.images([r.query for r in records])
        t = self.dataset.images([r.target for r in records])
        return q, [self.caption(r.caption) for r in records], t

    def compute_loss(self, records, rng=None) -> Tensor:
        q_imgs, caps, t_imgs = self.batch_arrays(records)
        q = self.model.embed_query(q_imgs, caps, rng=rng)
        t = self.model.embed_catalog(t_imgs, rng=rng)
        return batch_loss(q, t)

    def train_step(self, records=None) -> float:
        """One optimizer step; ``records`` overrides the sampler (fixed-batch runs)."""
        if records is None:
            records = [self.dataset.records[i] for i in self.sampler.next_batch(self.rng)]
        self.optimizer.zero_grad()
        with Tape():
            loss = self.compute_loss(records, rng=self.rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(self._dump(records, value))
            backward(loss, self.optimizer.params.values())
        self.optimizer.step(self.lrs(self.step))
        self.step += 1
        return value

    def _dump(self, records, value) -> str:
        info = {"step": self.step, "loss": repr(value),
                "batch": [{"query": r.query, "caption": r.caption, "target": r.target} for r in records]}
        return "non-finite loss; offending batch: " + json.dumps(info)

    def run(self, steps: Optional[int] = None, eval_fn: Optional[Callable] = None,
            log_path=None) -> list:
        """Train until ``max_steps`` (or ``steps`` more steps); returns the metrics log."""
        stop = self.cfg.max_steps if steps is None else self.step + steps
        sink = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while self.step < stop:
                lr = learning_rate(self.cfg.lr_other, self.step, self.cfg)
                loss = self.train_step()
                entry = None
                if self.cfg.log_every and (self.step % self.cfg.log_every == 0 or self.step == stop):
                    entry = {"step": self.step, "loss": loss, "lr": lr}
                if eval_fn and self.cfg.eval_interval and self.step % self.cfg.eval_interval == 0:
                    entry = entry or {"step": self.step, "loss": loss, "lr": lr}
                    entry.update(eval_fn(self.model))
                if entry:
                    self.history.append(entry)
                    log.info("step %d loss %.4f", self.step, loss)
                    if sink:
                        sink.write(json.dumps(entry) + "\n")
        finally:
            if sink:
                sink.close()
        return self.history

    # -- checkpointing -----------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors = {n: t.data for n, t in self.model.state_tensors().items()}
        for n, buf in self.optimizer.buffers.items():
            tensors[f"optim.momentum.{n}"] = buf
        return Checkpoint(tensors, self.run_config, list(self.vocab.words), self.step,
                          self.rng.bit_generator.state, {"sampler": self.sampler.state_dict()})

    def restore(self, ckpt: Checkpoint) -> None:
        load_model_state(self.model, ckpt)
        for n, buf in self.optimizer.buffers.items():
            key = f"optim.momentum.{n}"
            if key in ckpt.tensors:
                buf[...] = ckpt.tensors[key]
        self.step = ckpt.step
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        if "sampler" in ckpt.extra:
            self.sampler.load_state_dict(ckpt.extra["sampler"])


def load_model_state(model, ckpt: Checkpoint) -> None:
    state = model.state_tensors()
    missing = [n for n in state if n not in ckpt.tensors]
    if missing:
        raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
    for n, t in state.items():
        arr = ckpt.tensors[n]
        if arr.shape != t.shape:
            raise ValueError(f"tensor {n}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data[...] = arr


def train(model, dataset, vocab, cfg: TrainConfig, run_config: Optional[dict] = None,
          eval_fn: Optional[Callable] = None, log_path=None, resume: Optional[Checkpoint] = None):
    """Train and return (checkpoint, metrics log)."""
    trainer = Trainer(model, dataset, vocab, cfg, run_config)
    if resume is not None:
        trainer.restore(resume)
    history = trainer.run(eval_fn=eval_fn, log_path=log_path)
    return trainer.checkpoint(), history
