"""Recall@k retrieval evaluation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import no_grad
from .text_encoder import tokenize

DEFAULT_KS = (1, 5, 10, 50)


@dataclass
class RecallReport:
    recall: dict
    n_queries: int
    catalog_size: int
    per_category: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def composite(self) -> Optional[float]:
        """(R10 + R50) / 2 when both are reported."""
        if 10 in self.recall and 50 in self.recall:
            return (self.recall[10] + self.recall[50]) / 2
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall"] = {f"R{k}": v for k, v in sorted(self.recall.items())}
        d["per_category"] = {c: {f"R{k}": v for k, v in sorted(r.items())}
                             for c, r in sorted(self.per_category.items())}
        d["composite_R10_R50"] = self.composite
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        ks = sorted(self.recall)
        head = ["split"] + [f"R{k}" for k in ks] + (["(R10+R50)/2"] if self.composite is not None else [])
        rows = [["all"] + [f"{self.recall[k]:.4f}" for k in ks]
                + ([f"{self.composite:.4f}"] if self.composite is not None else [])]
        for cat, rec in sorted(self.per_category.items()):
            comp = [f"{(rec[10] + rec[50]) / 2:.4f}"] if self.composite is not None else []
            rows.append([cat] + [f"{rec[k]:.4f}" for k in ks] + comp)
        lines = [f"queries={self.n_queries} catalog={self.catalog_size} config={self.config_hash}"]
        lines.append(format_table(head, rows))
        return "\n".join(lines) + "\n"


def format_table(head: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [head, *rows]) for i in range(len(head))]
    fmt = lambda r: "  ".join(str(c).rjust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows])


def cosine_similarities(query_embs, catalog_embs) -> np.ndarray:
    """(queries, catalog) cosine matrix in which identical catalog rows score identically.

    A blocked BLAS product can round duplicate rows differently, which would
    turn exact ties into order-dependent near-ties; scoring unique rows only
    and scattering back avoids that.
    """
    q = np.atleast_2d(np.asarray(query_embs, dtype=np.float64))
    c = np.atleast_2d(np.asarray(catalog_embs, dtype=np.float64))
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    cn = c / np.linalg.norm(c, axis=1, keepdims=True)
    uniq, inverse = np.unique(cn, axis=0, return_inverse=True)
    return (qn @ uniq.T)[:, inverse.reshape(-1)]


def target_ranks(query_embs, target_ids, catalog_embs) -> np.ndarray:
    """0-based rank of each query's target under descending cosine similarity.

    Ties are broken by ascending catalog id.
    """
    c = np.asarray(catalog_embs, dtype=np.float64)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    missing = target_ids[(target_ids < 0) | (target_ids >= len(c))]
    if missing.size:
        raise KeyError(f"target ids not in catalog: {sorted(set(missing.tolist()))}")
    sims = cosine_similarities(query_embs, c)
    tsim = sims[np.arange(len(sims)), target_ids][:, None]
    ids = np.arange(len(c))[None, :]
    better = (sims > tsim) | ((sims == tsim) & (ids < target_ids[:, None]))
    return better.sum(axis=1)


def recall_at_k(query_embs, target_ids, catalog_embs, ks: Sequence[int] = DEFAULT_KS,
                categories: Optional[Sequence] = None, config_hash: str = "") -> RecallReport:
    ranks = target_ranks(query_embs, target_ids, catalog_embs)
    recall = {int(k): float(np.mean(ranks < k)) for k in ks}
    per_cat = {}
    if categories is not None:
        cats = np.asarray(categories, dtype=object)
        for cat in sorted({c for c in categories if c is not None}):
            sel = ranks[cats == cat]
            per_cat[cat] = {int(k): float(np.mean(sel < k)) for k in ks}
    return RecallReport(recall, len(ranks), len(catalog_embs), per_cat, config_hash)


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    return hashlib.sha1(blob).hexdigest()[:12]


def embed_images(model, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), chunk):
            out.append(model.embed_catalog(images[i:i + chunk]).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.fusion_config.d))


def embed_queries(model, images: np.ndarray, captions, chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), chunk):
            out.append(model.embed_query(images[i:i + chunk], captions[i:i + chunk]).data)
    return np.concatenate(out, axis=0)


def evaluate(model, vocab, dataset, catalog: Sequence[str], catalog_source, ks=DEFAULT_KS,
             limit: Optional[int] = None, config_hash: str = "", catalog_embs=None) -> RecallReport:
    """Recall@k of ``dataset`` queries against the catalog image paths.

    ``catalog_source`` is any object with ``images(paths)`` (normally a
    TripletDataset sharing the image cache).
    """
    records = dataset.records[:limit] if limit else dataset.records
    if catalog_embs is None:
        catalog_embs = embed_images(model, catalog_source.images(catalog))
    index = {p: i for i, p in enumerate(catalog)}
    target_ids = []
    for r in records:
        if r.target not in index:
            raise KeyError(f"target {r.target} not in catalog")
        target_ids.append(index[r.target])
    q_imgs = dataset.images([r.query for r in records])
    caps = [tokenize(r.caption, vocab) for r in records]
    q = embed_queries(model, q_imgs, caps)
    return recall_at_k(q, target_ids, catalog_embs, ks, [r.category for r in records], config_hash)


def save_embeddings(out_dir, embs: np.ndarray, ids: Sequence[str], scale: float) -> Path:
    """Write ``embeddings.f32`` (row-major little-endian float32) and ``embeddings.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    embs = np.asarray(embs)
    if embs.ndim != 2 or len(embs) != len(ids):
        raise ValueError(f"need one row per id, got {embs.shape} for {len(ids)} ids")
    (out / "embeddings.f32").write_bytes(np.ascontiguousarray(embs, dtype="<f4").tobytes())
    meta = {"dim": int(embs.shape[1]), "count": int(embs.shape[0]), "scale": float(scale), "ids": list(ids)}
    (out / "embeddings.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_embeddings(out_dir):
    """Inverse of ``save_embeddings``: (matrix, ids, scale)."""
    out = Path(out_dir)
    meta = json.loads((out / "embeddings.json").read_text(encoding="utf-8"))
    raw = np.frombuffer((out / "embeddings.f32").read_bytes(), dtype="<f4")
    if raw.size != meta["dim"] * meta["count"]:
        raise ValueError(f"{out}: payload holds {raw.size} floats, sidecar says {meta['count']}x{meta['dim']}")
    return raw.reshape(meta["count"], meta["dim"]).astype(np.float32), meta["ids"], meta["scale"]
