"""Compact oracle suites behind ``maaf selftest``.

Each check raises AssertionError on failure and returns a short detail string.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import oracles
from .autodiff import Tape, Tensor, backward, gradcheck, precision
from .autodiff import functional as F
from .checkpoint import Checkpoint
from .evaluation import recall_at_k, target_ranks
from .fusion import AttentionParams, FusionConfig, MAAFBlock, TwoStreamBlock, multi_head_attention
from .model import MAAFModel, ModelConfig
from .netpbm import read_pnm
from .pooling import PoolingConfig, pool_tokens
from .synthetic_css import ModCommand, apply_command, gen_scene, invert, render
from .text_encoder import LSTM, tokenize
from .tokens import COARSE, FINE, TEXT, Segment, TokenSequence
from .training import batch_loss
from .viz import bilinear_upsample, to_uint8, write_image


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _close(a, b, tol, what):
    err = float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))
    assert err <= tol, f"{what}: max abs err {err:.3g} > {tol:g}"
    return err


def check_elementary_ops() -> str:
    s = F.softmax(Tensor(np.zeros(3))).data
    _close(s, [1 / 3] * 3, 1e-15, "softmax of zeros")
    a = np.random.default_rng(0).standard_normal((3, 3))
    _close(F.matmul(np.eye(3), Tensor(a)).data, a, 0, "identity matmul")
    ln = F.layer_norm(Tensor(np.array([1.0, 2.0, 3.0])), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    _close(ln, oracles.layer_norm_ref([1.0, 2.0, 3.0]), 1e-12, "layer_norm")
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape():
        backward(F.sum_(F.mul(x, x)), [x])
    _close(x.grad, [2.0, 4.0], 0, "grad of dot(x, x)")
    return "softmax, matmul, layer_norm, backward"


def check_gradcheck() -> str:
    rng = np.random.default_rng(1)
    worst = 0.0
    a, b = Tensor(rng.standard_normal((4, 4))), Tensor(rng.standard_normal((4, 4)))
    worst = max(worst, gradcheck(lambda a, b: F.softmax(F.matmul(a, b)), [a, b]).max_rel_err)
    x = Tensor(rng.standard_normal((3, 5)))
    for fn in (F.sigmoid, F.tanh, F.relu, F.log_softmax, F.l2_normalize,
               lambda t: F.layer_norm(t, Tensor(np.ones(5)), Tensor(np.zeros(5)))):
        worst = max(worst, gradcheck(fn, [x]).max_rel_err)
    assert worst < 1e-4, f"max rel err {worst:.3g}"
    return f"max rel err {worst:.2e}"


def check_attention_oracle() -> str:
    rng = np.random.default_rng(2)
    d, h = 8, 2
    params = AttentionParams(d, h, rng)
    q, kv = rng.standard_normal((1, 5, d)), rng.standard_normal((1, 7, d))
    worst = 0.0
    for f in ("softmax", "identity"):
        got = multi_head_attention(Tensor(q), Tensor(kv), params, f=f).data
        ref = oracles.attention_ref(q, kv, params.w_q.data, params.w_k.data, params.w_v.data,
                                    params.w_o.data, h, f)
        worst = max(worst, _close(got, ref, 1e-6, f"attention ({f})"))
    return f"5x7 instance, max err {worst:.1e}"


def check_pooling_oracle() -> str:
    rng = np.random.default_rng(3)
    sizes = {COARSE: 4, FINE: 16, TEXT: 3}
    vals = rng.standard_normal((1, sum(sizes.values()), 6))
    segs, start = [], 0
    for g, n in sizes.items():
        segs.append(Segment(g, start, n))
        start += n
    seq = TokenSequence(Tensor(vals), tuple(segs))
    groups = [vals[0, s.start:s.stop].tolist() for s in segs]
    for rp in (True, False):
        got = F.l2_normalize(pool_tokens(seq, rp, include_text=True)).data[0]
        _close(got, oracles.pool_ref(groups, rp), 1e-12, f"pool rp={rp}")
    return "rp on/off with text"


def check_loss() -> str:
    rng = np.random.default_rng(4)
    q, t = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    _close(batch_loss(Tensor(q), Tensor(t)).data, oracles.batch_loss_ref(q, t), 1e-12, "batch loss")
    same = np.ones((5, 3))
    _close(batch_loss(Tensor(same), Tensor(same)).data, math.log(5), 1e-15, "identical embeddings")
    return "scalar cross-entropy, ln N"


def check_scale_temperature() -> str:
    rng = np.random.default_rng(5)
    u = rng.standard_normal((6, 8))
    v = rng.standard_normal((6, 8))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    s = 3.7
    scaled = batch_loss(Tensor(s * u), Tensor(s * v)).data
    tempered = F.cross_entropy(Tensor(s * s * (u @ v.T)), np.arange(6)).data
    _close(scaled, tempered, 1e-9, "scale vs temperature")
    return "s^2 logits identity"


def check_recall_oracle() -> str:
    rng = np.random.default_rng(6)
    cat = rng.standard_normal((6, 4))
    cat[3] = cat[1]  # a tie, broken by ascending id
    q = rng.standard_normal((6, 4))
    ids = [0, 1, 3, 5, 2, 4]
    assert target_ranks(q, ids, cat).tolist() == oracles.ranks_ref(q, ids, cat), "rank mismatch"
    distinct = rng.standard_normal((6, 4))
    assert recall_at_k(distinct, list(range(6)), distinct, ks=(1,)).recall[1] == 1.0, "self-retrieval R1"
    return "6-item handmade instance with a tie"


def check_lstm_oracle() -> str:
    rng = np.random.default_rng(7)
    cell = LSTM(2, 2, rng)
    cell.bias.data[...] = rng.standard_normal(8) * 0.1
    xs = rng.standard_normal((3, 2))
    got = cell(Tensor(xs[None])).data[0]
    _close(got, oracles.lstm_ref(xs, cell.w_input.data, cell.w_hidden.data, cell.bias.data), 1e-12, "lstm")
    return "2-dim toy cell, 3 steps"


def check_tokenizer() -> str:
    assert tokenize("Make Yellow Sphere small!").words == ["make", "yellow", "sphere", "small"]
    assert tokenize("is plaid, blue and black").words == ["is", "plaid", "blue", "and", "black"]
    assert tokenize(["is red", "has sleeves"]).words == ["is", "red", "+", "has", "sleeves"]
    assert tokenize("").empty
    return "documented examples"


def check_block_decomposition() -> str:
    rng = np.random.default_rng(8)
    d = 6
    kw = dict(heads=1, f="softmax", dropout=0.0, scale_scores=False, norm="none", rng=rng)
    x, y = rng.standard_normal((4, d)) * 0.5, rng.standard_normal((3, d)) * 0.5

    def silence_ffn(block):
        block.ffn.out.weight.data[...] = 0
        block.ffn.out.bias.data[...] = 0

    one = MAAFBlock(d, **kw)
    silence_ffn(one)
    one.attn.w_o.data[...] = np.eye(d)
    seq = TokenSequence(Tensor(np.concatenate([x, y])[None]), (Segment(COARSE, 0, 4, (2, 2)), Segment(TEXT, 4, 3)))
    got = one(seq).values.data[0, :4]
    a = one.attn
    res, xx, xy = oracles.one_stream_terms(x, y, a.w_q.data, a.w_k.data, a.w_v.data)
    _close(got, res + xx + xy, 1e-9, "one-stream decomposition")

    two = TwoStreamBlock(d, "self_then_cross", **kw)
    silence_ffn(two)
    for sub in two.sublayers:
        sub.attn.w_o.data[...] = np.eye(d)
        sub.attn.w_q.data[...] = a.w_q.data
        sub.attn.w_k.data[...] = a.w_k.data
        sub.attn.w_v.data[...] = a.w_v.data
    xs = TokenSequence(Tensor(x[None]), (Segment(COARSE, 0, 4, (2, 2)),))
    ys = TokenSequence(Tensor(y[None]), (Segment(TEXT, 0, 3),))
    got2 = two(xs, ys)[0].values.data[0]
    p = (a.w_q.data, a.w_k.data, a.w_v.data)
    res2, self_t, cross_t = oracles.two_stream_terms(x, y, p, p)
    _close(got2, res2 + self_t + cross_t, 1e-9, "two-stream decomposition")
    assert np.max(np.abs(got - got2)) > 1e-6, "split normalizers should change the output"
    return "joint A vs separate B, C"


def check_ita_parameter_count() -> str:
    counts = []
    for ita in (True, False):
        m = MAAFModel(FusionConfig(num_blocks=1, d=16, heads=2, ffn_width=32), PoolingConfig(ita=ita),
                      ModelConfig(channels=(4, 4, 8, 8)), vocab_size=10)
        counts.append(m.num_parameters())
    assert counts[0] == counts[1], f"{counts}"
    return f"{counts[0]} parameters either way"


def check_scenes() -> str:
    rng = np.random.default_rng(9)
    for _ in range(50):
        s = gen_scene(rng)
        o = s.objects[0]
        cmd = ModCommand("remove", (o.color, o.shape))
        t = apply_command(s, cmd)
        back = invert(s, cmd)
        if back is not None:
            assert set(apply_command(t, back).objects) == set(s.objects), "add/remove round trip"
        assert np.array_equal(render(s), render(s)), "render determinism"
    return "50 scenes: round trip, determinism"


def check_images() -> str:
    grid = np.random.default_rng(10).random((3, 3))
    _close(bilinear_upsample(grid, 12, 12), oracles.bilinear_ref(grid, 12, 12), 1e-12, "bilinear")
    assert (to_uint8(np.full((3, 3), 0.2)) == 128).all(), "constant grid must map to 128"
    with tempfile.TemporaryDirectory() as tmp:
        p = write_image(grid, Path(tmp) / "g.pgm")
        assert np.array_equal(read_pnm(p), to_uint8(grid)), "PGM round trip"
    return "bilinear oracle, 128 convention, PGM round trip"


def check_checkpoint() -> str:
    rng = np.random.default_rng(11)
    ck = Checkpoint({"a": rng.standard_normal((2, 3)).astype(np.float32)}, {"k": 1}, ["x"], 3,
                    np.random.default_rng(0).bit_generator.state)
    blob = ck.to_bytes()
    assert Checkpoint.from_bytes(blob).to_bytes() == blob, "save/load/save not byte-identical"
    try:
        Checkpoint.from_bytes(b"NOTMAAF!" + blob[8:])
    except ValueError:
        pass
    else:
        raise AssertionError("bad magic accepted")
    return "byte round trip, magic check"


CHECKS: dict = {
    "elementary_ops": check_elementary_ops,
    "gradcheck_ops": check_gradcheck,
    "attention_oracle": check_attention_oracle,
    "pooling_oracle": check_pooling_oracle,
    "loss_oracle": check_loss,
    "scale_temperature": check_scale_temperature,
    "recall_oracle": check_recall_oracle,
    "lstm_oracle": check_lstm_oracle,
    "tokenizer": check_tokenizer,
    "block_decomposition": check_block_decomposition,
    "ita_parameter_count": check_ita_parameter_count,
    "scenes": check_scenes,
    "images": check_images,
    "checkpoint": check_checkpoint,
}


def run_selftest(report: Callable[[CheckResult], None] = lambda r: None) -> list:
    results = []
    with precision("float64"):
        for name, fn in CHECKS.items():
            t0 = time.perf_counter()
            try:
                detail, ok = fn(), True
            except AssertionError as e:
                detail, ok = str(e) or "assertion failed", False
            res = CheckResult(name, ok, detail, time.perf_counter() - t0)
            report(res)
            results.append(res)
    return results
