"""End-to-end acceptance run: one PASS/FAIL line per criterion, gathered into the
``acceptance`` section of the pytest terminal summary.

Everything here runs single-threaded so CPU-time budgets are meaningful.
"""

import itertools
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from maaf import oracles, viz
from maaf.autodiff import Tensor, precision
from maaf.autodiff import functional as F
from maaf.checkpoint import Checkpoint
from maaf.cli import main as cli_main
from maaf.config import RunConfig, css_config
from maaf.evaluation import format_table, recall_at_k, target_ranks
from maaf.experiment import build_model, evaluate_model, load_data, model_from_checkpoint, train_run
from maaf.fusion import COMPOSITIONS, VARIANTS, AttentionParams, MAAFBlock, multi_head_attention
from maaf.gradsuite import model_gradcheck, op_suite
from maaf.pooling import pool_tokens
from maaf.synthetic_css import gen_dataset
from maaf.text_encoder import Vocabulary, tokenize
from maaf.tokens import COARSE, FINE, TEXT, Segment, TokenSequence
from maaf.training import Trainer, TrainingDiverged, batch_loss

pytestmark = pytest.mark.slow

CSS_STEPS = 2000       # mini-CSS runs (MAAF and image-only baseline)
VIZ_STEPS = 1500       # softmax model for the attention-map study
ABLATION_STEPS = 250   # per RP/ITA/IT combination
CSS_LR = ["train.lr_image=0.01"]


@pytest.fixture(scope="module", autouse=True)
def single_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="module")
def css_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini_css")
    gen_dataset(2000, 500, seed=0, out_dir=root)
    return root


def report(log, n, ok, detail):
    lines, _ = log
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n}: {detail}"
    lines.append(line)
    print(line)


# -- 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_integrity(acceptance_log):
    t0 = time.process_time()
    ops = op_suite(seeds=20)
    rep = model_gradcheck()
    secs = time.process_time() - t0
    worst = max(ops, key=lambda r: r.max_rel_err)
    ok = all(r.passed for r in ops) and rep.passed and secs < 300
    report(acceptance_log, 1, ok,
           f"{len(ops)} ops x 20 seeds worst {worst.max_rel_err:.2e} ({worst.name}); full model "
           f"{rep.max_rel_err:.2e} over {rep.checked} coords ({len(rep.excluded)} kink-excluded); "
           f"{secs:.0f} CPU-s < 300")
    assert ok


# -- 2 ---------------------------------------------------------------------------

def _attention_instance(r):
    d = int(r.choice([4, 6, 8]))
    heads = int(r.choice([h for h in (1, 2) if d % h == 0]))
    n, lq, lk = int(r.integers(1, 3)), int(r.integers(1, 6)), int(r.integers(1, 8))
    f = ["softmax", "identity"][int(r.integers(2))]
    mask = r.random((n, lk)) < 0.8
    mask[:, 0] = True
    p = AttentionParams(d, heads, r)
    q, kv = r.standard_normal((n, lq, d)), r.standard_normal((n, lk, d))
    got = multi_head_attention(Tensor(q), Tensor(kv), p, f=f, kv_mask=mask).data
    ref = oracles.attention_ref(q, kv, p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data, heads, f, kv_mask=mask)
    return np.max(np.abs(got - ref))


def _pooling_instance(r):
    d = int(r.integers(1, 7))
    sizes = [(COARSE, int(r.integers(1, 10))), (FINE, int(r.integers(1, 40))), (TEXT, int(r.integers(1, 8)))]
    rp, it = bool(r.integers(2)), bool(r.integers(2))
    segs, start = [], 0
    for g, k in sizes:
        segs.append(Segment(g, start, k))
        start += k
    vals = r.standard_normal((1, start, d))
    got = F.l2_normalize(pool_tokens(TokenSequence(Tensor(vals), tuple(segs)), rp, it)).data[0]
    groups = [vals[0, s.start:s.stop].tolist() for s in segs if it or s.group != TEXT]
    return np.max(np.abs(got - np.array(oracles.pool_ref(groups, rp))))


def _loss_instance(r):
    n, d = int(r.integers(2, 10)), int(r.integers(1, 8))
    s = r.uniform(0.5, 8.0)
    q, t = r.standard_normal((n, d)) * s, r.standard_normal((n, d)) * s
    return abs(float(batch_loss(Tensor(q), Tensor(t)).data) - oracles.batch_loss_ref(q, t))


def _recall_instance(r):
    nc, nq, d = int(r.integers(2, 1001)), int(r.integers(1, 21)), int(r.integers(2, 6))
    cat = r.standard_normal((nc, d))
    cat[r.integers(nc, size=nc // 10)] = cat[0]  # exact ties
    q = r.standard_normal((nq, d))
    ids = r.integers(nc, size=nq)
    ref = np.array(oracles.ranks_ref(q, ids, cat))
    got = target_ranks(q, ids, cat)
    rec = recall_at_k(q, ids, cat, ks=(1, 5, 10, 50)).recall
    err = max(abs(rec[k] - float(np.mean(ref < k))) for k in rec)
    return err if np.array_equal(got, ref) else math.inf


def test_criterion_2_oracle_equivalence(acceptance_log):
    t0 = time.process_time()
    worst = {}
    with precision("float64"):
        for name, fn in (("attention", _attention_instance), ("pooling", _pooling_instance),
                         ("loss", _loss_instance), ("recall@k", _recall_instance)):
            worst[name] = max(fn(np.random.default_rng([2, i])) for i in range(100))
    secs = time.process_time() - t0
    ok = all(v < 1e-6 for v in worst.values()) and secs < 120
    report(acceptance_log, 2, ok, "100 instances each, max err " +
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {secs:.0f} CPU-s < 120")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def _scale_temperature_gap(seed):
    """Model-produced batch: loss on s-scaled embeddings vs temperature 1/s^2 on unit ones."""
    cfg = RunConfig().with_overrides(["fusion.dropout=0.0", "model.channels=[4,4,8,8]"])
    r = np.random.default_rng(seed)
    vocab = Vocabulary.build(["make red cube small", "remove blue sphere"])
    model = build_model(cfg, len(vocab))
    model.scale.data[...] = r.uniform(0.5, 12.0)
    s = float(model.scale.data[0])
    caps = [tokenize(c, vocab) for c in ("make red cube small", "remove blue sphere", "make blue cube")]
    q = model.embed_query(r.random((3, 32, 32, 3)), caps).data
    t = model.embed_catalog(r.random((3, 32, 32, 3))).data
    scaled = float(batch_loss(Tensor(q), Tensor(t)).data)
    qn, tn = q / s, t / s
    tempered = float(F.cross_entropy(Tensor((qn @ tn.T) / (1.0 / s ** 2)), np.arange(3)).data)
    return abs(scaled - tempered)


def _decomposition_gap(seed):
    r = np.random.default_rng(seed)
    d = 6
    blk = MAAFBlock(d, heads=1, f="softmax", dropout=0.0, scale_scores=False, norm="none", rng=r)
    blk.ffn.out.weight.data[...] = 0
    blk.ffn.out.bias.data[...] = 0
    blk.attn.w_o.data[...] = np.eye(d)
    nx, ny = int(r.integers(1, 10)), int(r.integers(1, 6))
    x, y = r.standard_normal((nx, d)) * 0.5, r.standard_normal((ny, d)) * 0.5
    seq = TokenSequence(Tensor(np.concatenate([x, y])[None]), (Segment(COARSE, 0, nx), Segment(TEXT, nx, ny)))
    got = blk(seq).values.data[0, :nx]
    res, xx, xy = oracles.one_stream_terms(x, y, blk.attn.w_q.data, blk.attn.w_k.data, blk.attn.w_v.data)
    return np.max(np.abs(got - (res + xx + xy)))


def test_criterion_3_algebraic_identities(acceptance_log):
    with precision("float64"):
        gap_a = max(_scale_temperature_gap(s) for s in range(10))
        gap_b = max(_decomposition_gap(s) for s in range(20))
    counts = {}
    for name, base in (("default", RunConfig()), ("css", css_config())):
        for ita in (True, False):
            cfg = base.with_overrides([f"pooling.ita={'true' if ita else 'false'}"])
            counts[(name, ita)] = build_model(cfg, 30).num_parameters()
    ok_c = all(counts[(n, True)] == counts[(n, False)] for n in ("default", "css"))
    ok = gap_a < 1e-9 and gap_b < 1e-9 and ok_c
    report(acceptance_log, 3, ok,
           f"(a) scale/temperature gap {gap_a:.1e} over 10 batches; (b) one-stream decomposition gap "
           f"{gap_b:.1e} over 20 instances; (c) ITA parameter counts default {counts[('default', True)]}="
           f"{counts[('default', False)]}, css {counts[('css', True)]}={counts[('css', False)]}")
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_criterion_4_mini_css_end_to_end(css_root, acceptance_log):
    t0 = time.process_time()
    base = css_config().with_overrides([f"data.root={css_root}"] + CSS_LR)
    data = load_data(base)
    results = {}
    for name, extra in (("maaf", []), ("image_only", ["model.image_only=true"])):
        cfg = base.with_overrides(extra)
        tr, _ = train_run(cfg, data, steps=CSS_STEPS)
        results[name] = evaluate_model(tr.model, data, cfg)
    secs = time.process_time() - t0
    r1, b1 = results["maaf"].recall[1], results["image_only"].recall[1]
    chance = 1 / results["maaf"].catalog_size
    ok = results["maaf"].catalog_size == 2500 and r1 >= 2 * b1 and r1 >= 5 * chance and secs < 1800
    report(acceptance_log, 4, ok,
           f"R1 MAAF {r1:.3f} vs image-only {b1:.3f} (need >= {2 * b1:.3f}) and >= 5x chance {5 * chance:.4f}; "
           f"catalog {results['maaf'].catalog_size}; {CSS_STEPS} steps each; {secs / 60:.1f} CPU-min < 30")
    assert ok


# -- 5 ---------------------------------------------------------------------------

FIXED_BATCH_LR = ["train.lr_other=0.0001", "train.lr_image=0.00001"]


def test_criterion_5_variant_coverage(css_root, acceptance_log):
    rows, failures = [], []
    base = RunConfig().with_overrides([f"data.root={css_root}"])
    data = load_data(base)
    for variant in VARIANTS:
        cfg = base.with_overrides([f"fusion.variant={variant}", "fusion.dropout=0.0"] + FIXED_BATCH_LR)
        tr = Trainer(build_model(cfg, len(data.vocab)), data.train, data.vocab, cfg.train)
        batch = data.train.records[:cfg.train.batch_size]
        losses = [tr.train_step(batch) for _ in range(50)]
        strictly = bool(np.all(np.diff(losses) < 0))
        r10 = evaluate_model(tr.model, data, cfg, limit=100).recall[10]
        schedules = "n/a"
        if variant in COMPOSITIONS:
            finite = []
            for sched in ("half", "half+warmup5000"):
                scfg = base.with_overrides([f"fusion.variant={variant}", f"train.schedule={sched}"])
                st = Trainer(build_model(scfg, len(data.vocab)), data.train, data.vocab, scfg.train)
                try:
                    finite.append(all(np.isfinite(st.train_step()) for _ in range(20)))
                except TrainingDiverged:
                    finite.append(False)
            schedules = "ok" if all(finite) else "NaN"
            if not all(finite):
                failures.append(f"{variant} schedules")
        if not strictly:
            failures.append(f"{variant} loss not strictly decreasing")
        rows.append([variant, f"{losses[0]:.3f}", f"{losses[-1]:.3f}", str(strictly), f"{r10:.3f}", schedules])
    acceptance_log[1]["variant coverage (50 fixed-batch steps)"] = format_table(
        ["variant", "loss@1", "loss@50", "strict", "R10@100q", "alt schedules"], rows)
    ok = not failures
    report(acceptance_log, 5, ok, f"{len(VARIANTS)} variants trained 50 fixed-batch steps and evaluated; "
           + ("all strictly decreasing, two-stream schedules finite" if ok else "; ".join(failures)))
    assert ok


# -- 6 ---------------------------------------------------------------------------

def _ablation_table(css_root) -> str:
    base = css_config().with_overrides([f"data.root={css_root}"] + CSS_LR)
    data = load_data(base)
    rows = []
    for rp, ita, it in itertools.product((True, False), repeat=3):
        flags = [f"pooling.{k}={'true' if v else 'false'}" for k, v in (("rp", rp), ("ita", ita), ("it", it))]
        cfg = base.with_overrides(flags)
        tr, _ = train_run(cfg, data, steps=ABLATION_STEPS)
        rec = evaluate_model(tr.model, data, cfg).recall
        rows.append([str(rp), str(ita), str(it)] + [f"{rec[k]:.4f}" for k in (1, 10, 50)])
    return format_table(["RP", "ITA", "IT", "R1", "R10", "R50"], rows)


def test_criterion_6_ablation_matrix(css_root, acceptance_log):
    first = _ablation_table(css_root)
    second = _ablation_table(css_root)
    acceptance_log[1][f"RP/ITA/IT ablation ({ABLATION_STEPS} steps each)"] = first
    ok = first == second and len(first.splitlines()) == 10
    report(acceptance_log, 6, ok, f"8 RP/ITA/IT combinations trained {ABLATION_STEPS} steps; table "
           + ("identical across two runs" if first == second else "DIFFERS between runs"))
    assert ok


# -- 7 ---------------------------------------------------------------------------

def test_criterion_7_visualization(css_root, tmp_path, acceptance_log):
    cfg = css_config().with_overrides([f"data.root={css_root}", "fusion.f=softmax"] + CSS_LR)
    data = load_data(cfg)
    tr, _ = train_run(cfg, data, out_dir=tmp_path, steps=VIZ_STEPS)
    loaded, vocab, _ = model_from_checkpoint(Checkpoint.load(tmp_path / "checkpoint.maaf"))
    records = data.test.records[:100]
    imgs = data.test.images([r.query for r in records])
    caps = [tokenize(r.caption, vocab) for r in records]
    captured = viz.capture_records(tr.model, imgs, caps)
    recomputed = viz.recompute_block_weights(loaded, imgs, caps, block=0)
    gap = 0.0
    for i, rec in enumerate(captured):
        k = rec.weights[0].shape[-1]
        gap = max(gap, float(np.max(np.abs(rec.weights[0] - recomputed[i, :, :k, :k]))))
        for j in range(len(rec.words)):
            a = viz.extract_word_map(rec, j, COARSE)
            b = recomputed[i, :, rec.n_image_tokens + j, :rec.segment(COARSE).stop].mean(0).reshape(a.shape)
            gap = max(gap, float(np.max(np.abs(a - b))))
    km = viz.position_word_maps(viz.collect_records(tr.model, data.test, data.vocab))
    sign = viz.position_sign_test(km)
    below = sum(v["below_mean"] for v in sign.values())
    ok = gap < 1e-6
    report(acceptance_log, 7, ok, f"captured vs checkpoint-recomputed attention max gap {gap:.1e} < 1e-6 "
           f"(hard gate, 100 test queries)")
    report(acceptance_log, "7 (sign test, reported finding)", below >= 7,
           f"referenced cell below grid mean for {below}/{len(sign)} position words (target >= 7); "
           f"softmax mini-CSS model, {VIZ_STEPS} steps")
    assert ok


# -- 8 ---------------------------------------------------------------------------

def _cli(*argv):
    code = cli_main([str(a) for a in argv])
    assert code == 0, argv


def test_criterion_8_determinism(css_root, tmp_path, acceptance_log):
    common = ["--preset", "css", "--set", f"data.root={css_root}", "--set", 'train.precision="float64"',
              "--set", "fusion.f=softmax", "--set", "train.log_every=1"] + sum([["--set", o] for o in CSS_LR], [])
    for name in ("a", "b"):
        run = tmp_path / name
        _cli("train", *common, "--out", run, "--steps", 6, "--eval")
        _cli("eval", "--checkpoint", run / "checkpoint.maaf", "--out", run / "eval", "--limit", 200)
        _cli("viz-attn", "--checkpoint", run / "checkpoint.maaf", "--word", "positions", "--limit", 200,
             "--out", run / "viz")
        _cli("viz-attn", "--checkpoint", run / "checkpoint.maaf", "--word", "red", "--limit", 200,
             "--out", run / "viz")
    resumed = tmp_path / "r"
    _cli("train", *common, "--out", resumed, "--steps", 3)
    _cli("train", "--resume", resumed / "checkpoint.maaf", "--out", resumed, "--steps", 3)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    for f in ("checkpoint.maaf", "metrics.jsonl"):
        if (tmp_path / "a" / f).read_bytes() != (resumed / f).read_bytes():
            differ.append(f"resume:{f}")
    images = [f for f in files if f.suffix in (".png", ".pgm", ".ppm")]
    ok = not differ and len(images) >= 12
    report(acceptance_log, 8, ok, f"{len(files)} files ({len(images)} images) byte-identical across two 64-bit runs; "
           f"3+3 resumed run matches 6 straight" if ok else f"differing: {differ}")
    assert ok
