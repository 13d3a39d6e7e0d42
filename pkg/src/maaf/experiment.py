"""Glue between RunConfig, datasets, training and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import precision
from .checkpoint import Checkpoint
from .config import RunConfig
from .evaluation import RecallReport, config_hash, embed_images, evaluate
from .model import MAAFModel
from .synthetic_css import TripletDataset, catalog_paths
from .text_encoder import Vocabulary
from .training import Trainer, load_model_state

log = logging.getLogger(__name__)


def build_model(cfg: RunConfig, vocab_size: int) -> MAAFModel:
    return MAAFModel(cfg.fusion, cfg.pooling, cfg.model, vocab_size, seed=cfg.train.seed)


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild (model, vocab, RunConfig) from a checkpoint, in its stored precision."""
    cfg = RunConfig.from_dict(ckpt.config)
    vocab = Vocabulary(ckpt.vocab)
    with precision(cfg.train.precision):
        model = build_model(cfg, len(vocab))
    load_model_state(model, ckpt)
    return model, vocab, cfg


@dataclass
class Data:
    train: TripletDataset
    test: TripletDataset
    vocab: Vocabulary
    catalog: list

    def images(self, paths):
        return self.train.images(paths)


def load_data(cfg: RunConfig) -> Data:
    train = TripletDataset.from_manifest(cfg.data.path("train"))
    test = TripletDataset.from_manifest(cfg.data.path("test"))
    test._cache = train._cache  # one shared image cache
    vocab_path = cfg.data.path("vocab")
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else Vocabulary.build(r.caption for r in train.records)
    return Data(train, test, vocab, catalog_paths(train, test))


def evaluate_model(model, data: Data, cfg: RunConfig, split: str = "test", limit: Optional[int] = None,
                   ks=(1, 5, 10, 50)) -> RecallReport:
    ds = data.test if split == "test" else data.train
    with precision(cfg.train.precision):
        return evaluate(model, data.vocab, ds, data.catalog, data, ks=ks, limit=limit,
                        config_hash=config_hash(cfg.to_dict()))


def train_run(cfg: RunConfig, data: Optional[Data] = None, out_dir=None, steps: Optional[int] = None,
              resume: Optional[Checkpoint] = None):
    """Train per ``cfg``; writes ``checkpoint.maaf`` and ``metrics.jsonl`` when ``out_dir`` is set.

    Returns (trainer, data).
    """
    data = data or load_data(cfg)
    with precision(cfg.train.precision):
        model = build_model(cfg, len(data.vocab))
        trainer = Trainer(model, data.train, data.vocab, cfg.train, cfg.to_dict())
        if resume is not None:
            trainer.restore(resume)
        log_path = None
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            log_path = out / "metrics.jsonl"
            if resume is None and log_path.exists():
                log_path.unlink()
        eval_fn = None
        if cfg.train.eval_interval:
            def eval_fn(m):
                rep = evaluate(m, data.vocab, data.test, data.catalog, data, ks=(1, 10, 50),
                               limit=cfg.train.eval_queries)
                return {f"recall@{k}": v for k, v in rep.recall.items()}
        trainer.run(steps=steps, eval_fn=eval_fn, log_path=log_path)
        if out_dir is not None:
            trainer.checkpoint().save(Path(out_dir) / "checkpoint.maaf")
    return trainer, data
