"""``maaf`` command line: gen-data, train, eval, search, viz-attn, gradcheck, selftest.

Results go to stdout (tables or JSON lines). Failures print one JSON object on
stderr and exit 1, or 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import viz
from .autodiff import no_grad, precision
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, css_config
from .evaluation import cosine_similarities, embed_images, load_embeddings, save_embeddings
from .experiment import Data, evaluate_model, load_data, model_from_checkpoint, train_run
from .gradsuite import run_all
from .netpbm import read_image
from .plotting import plot_loss_curve, plot_position_maps, plot_recall_bars, plot_word_map
from .selftest import run_selftest
from .synthetic_css import COLORS, POSITIONS, TripletDataset, gen_dataset
from .text_encoder import tokenize

log = logging.getLogger("maaf")

PRESETS = {"default": RunConfig, "css": css_config}


class CLIError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else PRESETS[args.preset]()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _load_checkpoint(path):
    try:
        return Checkpoint.load(path)
    except FileNotFoundError as e:
        raise CLIError(f"checkpoint not found: {path}") from e


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or cfg.data.root)
    manifest = gen_dataset(args.n_train, args.n_test, seed=cfg.train.seed, out_dir=out, px=args.px,
                           queries_per_scene=args.queries_per_scene)
    _emit({"out": str(out), **{k: v for k, v in manifest.items() if isinstance(v, (int, str))}})
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = _load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        cfg = RunConfig.from_dict(resume.config)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    trainer, data = train_run(cfg, out_dir=out, steps=args.steps, resume=resume)
    if trainer.history:
        plot_loss_curve(trainer.history, out / "loss.png", title="training loss")
    summary = {"step": trainer.step, "checkpoint": str(out / "checkpoint.maaf"),
               "final_loss": trainer.history[-1]["loss"] if trainer.history else None}
    if args.eval:
        rep = evaluate_model(trainer.model, data, cfg)
        (out / "report.json").write_text(rep.to_json(), encoding="utf-8")
        summary["recall"] = rep.to_dict()["recall"]
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model, vocab, cfg = model_from_checkpoint(ckpt)
    if args.data:
        cfg.data.root = args.data
    data = load_data(cfg)
    data = Data(data.train, data.test, vocab, data.catalog)
    rep = evaluate_model(model, data, cfg, split=args.split, limit=args.limit)
    sys.stdout.write(rep.to_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(rep.to_json(), encoding="utf-8")
        (out / "report.txt").write_text(rep.to_table(), encoding="utf-8")
        plot_recall_bars({args.split: rep.recall}, out / "recall.png", ks=sorted(rep.recall))
    if args.export_embeddings:
        with precision(cfg.train.precision):
            embs = embed_images(model, data.train.images(data.catalog))
        save_embeddings(args.export_embeddings, embs, data.catalog, float(model.scale.data[0]))
    return 0


def _catalog(model, cfg, directory: Path):
    if (directory / "embeddings.json").exists():
        embs, ids, _ = load_embeddings(directory)
        return embs, ids
    ids = sorted(str(p) for p in directory.iterdir() if p.suffix in (".ppm", ".pnm"))
    if not ids:
        raise CLIError(f"no .ppm images or embeddings.json in {directory}")
    with precision(cfg.train.precision):
        return embed_images(model, np.stack([read_image(p) for p in ids])), ids


def cmd_search(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model, vocab, cfg = model_from_checkpoint(ckpt)
    if args.k < 1:
        raise CLIError("-k must be at least 1")
    cap = tokenize(args.text if len(args.text) > 1 else args.text[0], vocab)
    if cap.empty:
        raise CLIError("query caption is empty")
    catalog, ids = _catalog(model, cfg, Path(args.catalog))
    with precision(cfg.train.precision), no_grad():
        q = model.embed_query(read_image(args.image)[None], [cap]).data[0].astype(np.float64)
    sims = cosine_similarities(q, catalog)[0]
    order = np.lexsort((np.arange(len(ids)), -sims))[:args.k]
    for rank, i in enumerate(order, 1):
        _emit({"rank": rank, "id": ids[i], "similarity": float(sims[i])})
    return 0


def cmd_viz_attn(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model, vocab, cfg = model_from_checkpoint(ckpt)
    if args.data:
        cfg.data.root = args.data
    ds = TripletDataset.from_manifest(cfg.data.path(args.split))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with precision(cfg.train.precision):
        pairs = viz.collect_records(model, ds, vocab, limit=args.limit)
    summary = {"examples": len(pairs), "group": args.group}
    if args.word == "positions":
        km = viz.position_word_maps(pairs, args.group, args.block)
        for word, grid in km.maps.items():
            viz.write_image(grid, out / f"{word}.pgm")
        plot_position_maps(km.maps, out / "positions.png", title=f"position words, {args.group} tokens")
        test = viz.position_sign_test(km)
        (out / "sign_test.json").write_text(json.dumps(test, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        summary["below_mean"] = sum(v["below_mean"] for v in test.values())
        summary["words"] = len(test)
    else:
        word = args.word
        grids, _ = viz.word_maps(pairs, word, args.group, args.block)
        if not grids:
            raise CLIError(f"word {word!r} does not occur in the {args.split} captions")
        grid = viz.aggregate_maps(grids)
        viz.write_image(grid, out / f"{word}.pgm")
        plot_word_map(grid, out / f"{word}.png", title=f"{word} ({len(grids)} examples)")
        summary.update(word=word, count=len(grids))
        if word in COLORS:
            km = viz.color_word_images(pairs, ds, args.group, args.block)
            if word in km.maps:
                viz.write_image(km.maps[word], out / f"{word}_modulated.ppm")
        if word in POSITIONS:
            summary["sign_test"] = viz.position_sign_test(viz.KeywordMaps({word: grid}, {word: len(grids)}))[word]
    _emit(summary)
    return 0


def cmd_gradcheck(args) -> int:
    def report(r):
        _emit({"suite": r.name, "max_rel_err": r.max_rel_err, "passed": r.passed,
               "checked": r.checked, "excluded": r.excluded})

    cfg = resolve_config(args)
    results = run_all(args.seeds, model=not args.ops_only, report=report, cfg=cfg, px=args.px,
                      max_coords=args.max_coords)
    return 0 if all(r.passed for r in results) else 1


def cmd_selftest(args) -> int:
    def report(r):
        sys.stdout.write(f"{'PASS' if r.passed else 'FAIL'}  {r.name:22s} {r.seconds:6.2f}s  {r.detail}\n")

    results = run_selftest(report)
    failed = [r.name for r in results if not r.passed]
    sys.stdout.write(f"{len(results) - len(failed)}/{len(results)} checks passed\n")
    return 1 if failed else 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file (default: the --preset)")
    common.add_argument("--preset", choices=sorted(PRESETS), default="default",
                        help="built-in config used when --config is absent")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config field; repeatable; values parse as JSON")
    common.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads (fallback: MAAF_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="maaf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic scene benchmark")
    g.add_argument("--out", help="output directory (default: data.root)")
    g.add_argument("--n-train", type=int, default=2000, help="training triples")
    g.add_argument("--n-test", type=int, default=500, help="test triples")
    g.add_argument("--px", type=int, default=48, help="image side in pixels, a multiple of 48")
    g.add_argument("--queries-per-scene", type=int, default=8, help="commands drawn per source scene")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model; writes checkpoint.maaf and metrics.jsonl")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--steps", type=int, help="train this many steps (default: train.max_steps)")
    t.add_argument("--resume", help="checkpoint to continue from; its config wins")
    t.add_argument("--eval", action="store_true", help="evaluate on the test split afterwards")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="recall@k of a checkpoint on a manifest split")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", help="dataset root (default: the checkpoint's data.root)")
    e.add_argument("--split", choices=("test", "train"), default="test", help="which manifest to query")
    e.add_argument("--limit", type=int, help="evaluate only the first N queries")
    e.add_argument("--out", help="write report.json, report.txt and recall.png here")
    e.add_argument("--export-embeddings", metavar="DIR", help="write catalog embeddings (f32 matrix + JSON)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("search", parents=[common], help="rank a catalog for one image + caption query")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--image", required=True, help="query image (PPM)")
    s.add_argument("--text", required=True, action="append",
                   help="modifying caption; repeat to join several captions with '+'")
    s.add_argument("--catalog", required=True, help="directory of PPM images or exported embeddings")
    s.add_argument("-k", type=int, default=10, help="results to return (clamped to catalog size)")
    s.set_defaults(func=cmd_search)

    v = sub.add_parser("viz-attn", parents=[common], help="aggregate word-to-image attention maps")
    v.add_argument("--checkpoint", required=True, help="checkpoint file (one-stream model)")
    v.add_argument("--word", required=True, help="caption word, or 'positions' for all nine position words")
    v.add_argument("--group", choices=("coarse", "fine"), default="coarse", help="image token group")
    v.add_argument("--block", type=int, default=-1, help="attention block index")
    v.add_argument("--data", help="dataset root (default: the checkpoint's data.root)")
    v.add_argument("--split", choices=("test", "train"), default="test", help="manifest to draw captions from")
    v.add_argument("--limit", type=int, help="use only the first N records")
    v.add_argument("--out", required=True, help="output directory for PGM/PPM/PNG files")
    v.set_defaults(func=cmd_viz_attn)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the model")
    c.add_argument("--seeds", type=int, default=20, help="random instances per op")
    c.add_argument("--px", type=int, default=64, help="image side for the model check")
    c.add_argument("--max-coords", type=int, default=32, help="coordinates sampled per parameter tensor")
    c.add_argument("--ops-only", action="store_true", help="skip the full-model check")
    c.set_defaults(func=cmd_gradcheck)

    st = sub.add_parser("selftest", parents=[common], help="run the built-in oracle suites")
    st.set_defaults(func=cmd_selftest)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    threads = args.threads or (int(os.environ["MAAF_THREADS"]) if os.environ.get("MAAF_THREADS") else None)
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except ConfigError as e:
        return _fail("config", str(e), 2)
    except CheckpointError as e:
        return _fail("checkpoint", str(e), 1)
    except (CLIError, ValueError, KeyError, OSError) as e:
        return _fail(type(e).__name__, str(e).strip("'\""), 1)


if __name__ == "__main__":
    sys.exit(main())
