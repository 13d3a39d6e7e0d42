"""Gradient-check suites: every cataloged op over many seeds, and the full model."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import GradcheckReport, Tensor, gradcheck, precision
from .autodiff import functional as F
from .config import RunConfig
from .model import MAAFModel
from .text_encoder import Vocabulary, tokenize
from .training import batch_loss


def _normal(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _positive(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, shape))


def _away_from_zero(rng, *shape):
    x = rng.standard_normal(shape)
    return Tensor(np.sign(x) * (np.abs(x) + 0.5))


def _dropout(x):
    return F.dropout(x, 0.3, np.random.default_rng(123))


# name -> builder(rng) returning (function, inputs)
OP_CASES: dict = {
    "add": lambda r: (F.add, [_normal(r, 3, 4), _normal(r, 4)]),
    "sub": lambda r: (F.sub, [_normal(r, 3, 4), _normal(r, 3, 1)]),
    "mul": lambda r: (F.mul, [_normal(r, 3, 4), _normal(r, 3, 4)]),
    "div": lambda r: (F.div, [_normal(r, 3, 4), _away_from_zero(r, 3, 4)]),
    "scale": lambda r: (lambda x: F.scale(x, 0.37), [_normal(r, 5)]),
    "exp": lambda r: (F.exp, [_normal(r, 3, 4)]),
    "log": lambda r: (F.log, [_positive(r, 3, 4)]),
    "identity": lambda r: (F.identity, [_normal(r, 3, 4)]),
    "relu": lambda r: (F.relu, [_normal(r, 3, 4)]),
    "sigmoid": lambda r: (F.sigmoid, [_normal(r, 3, 4)]),
    "tanh": lambda r: (F.tanh, [_normal(r, 3, 4)]),
    "matmul": lambda r: (F.matmul, [_normal(r, 3, 4), _normal(r, 4, 2)]),
    "matmul_batched": lambda r: (F.matmul, [_normal(r, 2, 3, 4), _normal(r, 4, 5)]),
    "reshape": lambda r: (lambda x: F.reshape(x, (4, 3)), [_normal(r, 3, 4)]),
    "transpose": lambda r: (lambda x: F.transpose(x, (2, 0, 1)), [_normal(r, 2, 3, 4)]),
    "concat": lambda r: (lambda a, b: F.concat([a, b], axis=1), [_normal(r, 2, 3), _normal(r, 2, 2)]),
    "slice": lambda r: (lambda x: x[:, 1:3], [_normal(r, 3, 4)]),
    "sum": lambda r: (lambda x: F.sum_(x, axis=0), [_normal(r, 3, 4)]),
    "sorted_sum": lambda r: (lambda x: F.sorted_sum(x, axis=1), [_normal(r, 2, 5, 3)]),
    "mean": lambda r: (lambda x: F.mean(x, axis=-1), [_normal(r, 3, 4)]),
    "softmax": lambda r: (F.softmax, [_normal(r, 3, 5)]),
    "log_softmax": lambda r: (F.log_softmax, [_normal(r, 3, 5)]),
    "layer_norm": lambda r: (F.layer_norm, [_normal(r, 3, 6), _normal(r, 6), _normal(r, 6)]),
    "l2_normalize": lambda r: (F.l2_normalize, [_normal(r, 3, 5)]),
    "dropout": lambda r: (_dropout, [_normal(r, 4, 5)]),
    "embedding": lambda r: (lambda w: F.embedding(w, np.array([[0, 3, 3], [1, 2, 0]])), [_normal(r, 4, 3)]),
    "conv2d": lambda r: (lambda x, w, b: F.conv2d(x, w, b, stride=2, pad=1),
                         [_normal(r, 1, 6, 6, 2), _normal(r, 3, 3, 2, 3), _normal(r, 3)]),
    "max_pool2d": lambda r: (lambda x: F.max_pool2d(x, 2), [_normal(r, 1, 4, 4, 2)]),
    "linear": lambda r: (F.linear, [_normal(r, 3, 4), _normal(r, 4, 2), _normal(r, 2)]),
    "cross_entropy": lambda r: (lambda z: F.cross_entropy(z, np.array([0, 2, 1])), [_normal(r, 3, 4)]),
    "softmax_matmul": lambda r: (lambda a, b: F.softmax(F.matmul(a, b)), [_normal(r, 4, 4), _normal(r, 4, 4)]),
}


@dataclass
class SuiteResult:
    name: str
    max_rel_err: float
    passed: bool
    checked: int
    excluded: int
    detail: str = ""


def op_suite(seeds: int = 20, eps: float = 1e-3, tol: float = 1e-4,
             names: Optional[list] = None) -> list:
    """One SuiteResult per op: worst relative error over ``seeds`` random instances."""
    out = []
    with precision("float64"):
        for name in names or OP_CASES:
            worst, checked, excluded = 0.0, 0, 0
            for seed in range(seeds):
                fn, inputs = OP_CASES[name](np.random.default_rng(seed))
                rep = gradcheck(fn, inputs, eps=eps, tol=tol, seed=10_000 + seed)
                worst = max(worst, rep.max_rel_err)
                checked += rep.checked
                excluded += len(rep.excluded)
            out.append(SuiteResult(name, worst, worst < tol, checked, excluded))
    return out


def model_gradcheck(cfg=None, px: int = 64, max_coords: int = 32, eps: float = 1e-3, tol: float = 1e-4,
                    seed: int = 0) -> GradcheckReport:
    """embed_query -> batch_loss on a 2-example batch, dropout off, every parameter tensor sampled."""
    cfg = cfg or RunConfig()
    fusion_cfg = dataclasses.replace(cfg.fusion, dropout=0.0)
    captions = ["make red cube small", "remove blue sphere"]
    with precision("float64"):
        vocab = Vocabulary.build(captions)
        model = MAAFModel(fusion_cfg, cfg.pooling, cfg.model, len(vocab), seed=seed)
        rng = np.random.default_rng(seed)
        queries, targets = rng.random((2, px, px, 3)), rng.random((2, px, px, 3))
        caps = [tokenize(c, vocab) for c in captions]
        names, params = zip(*model.named_parameters())

        def loss(*_):
            return batch_loss(model.embed_query(queries, caps), model.embed_catalog(targets))

        rep = gradcheck(loss, list(params), eps=eps, tol=tol, max_coords=max_coords, seed=seed)
    if rep.worst is not None:
        rep.worst = (names[rep.worst[0]],) + tuple(rep.worst[1:])
    return rep


def run_all(seeds: int = 20, model: bool = True, report: Callable = lambda r: None, **model_kw) -> list:
    results = op_suite(seeds)
    for r in results:
        report(r)
    if model:
        rep = model_gradcheck(**model_kw)
        r = SuiteResult("full_model", rep.max_rel_err, rep.passed, rep.checked, len(rep.excluded),
                        f"worst at {rep.worst[0]}" if rep.worst else "")
        report(r)
        results.append(r)
    return results
