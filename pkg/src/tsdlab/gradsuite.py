"""The finite-difference gradient suite shared by the CLI and the tests.

Each case builds a scalar function of a few parameter tensors; the suite
compares backward() against central differences for every one of them.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, TSDDecoder, mask_bias
from .encoder import EncoderConfig, ViTEncoder
from .gradcheck import GradCheckResult, gradcheck
from .losses import (BNNeckHead, ce_bnneck, cross_entropy, distillation_loss, diversity_loss,
                     focal_visibility_loss, part_avg_triplet, triplet_batch_hard)
from .maskgen import MaskGenerator, parsing_loss, part_pool
from .model import RunConfig, TSDModel, variant
from .nn import attend
from .tensor import Tensor

TOLERANCE = 1e-4
Case = tuple[Callable[[], Tensor], list[tuple[str, Tensor]]]


@dataclass
class SuiteResult:
    results: dict[str, list[GradCheckResult]] = field(default_factory=dict)
    seconds: float = 0.0
    tol: float = TOLERANCE

    @property
    def failures(self) -> list[tuple[str, GradCheckResult]]:
        return [(case, r) for case, rs in self.results.items() for r in rs if not r.ok(self.tol)]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max((r.rel_error for rs in self.results.values() for r in rs), default=0.0)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _weighted(out_fn, rng) -> Callable[[], Tensor]:
    """Contract an arbitrary-shape output with fixed random weights into a scalar."""
    w = {}

    def fn():
        out = out_fn()
        if "w" not in w:
            w["w"] = Tensor(rng.normal(size=out.shape))
        return (out * w["w"]).sum()
    return fn


def op_cases(rng: np.random.Generator) -> Iterator[tuple[str, Case]]:
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    yield "matmul", (_weighted(lambda: T.matmul(a, b), rng), [("a", a), ("b", b)])

    x = _leaf(rng, 3, 5)
    bias = np.where(rng.random((3, 5)) < 0.4, -np.inf, 0.0)
    bias[:, 0] = 0.0
    yield "softmax_masked", (_weighted(lambda: T.softmax(x + Tensor(bias)), rng), [("x", x)])
    yield "log_softmax", (_weighted(lambda: T.log_softmax(x), rng), [("x", x)])

    xl, g, bl = _leaf(rng, 2, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    yield "layer_norm", (_weighted(lambda: T.layer_norm(xl, g, bl), rng), [("x", xl), ("gain", g), ("bias", bl)])

    unary = {
        "gelu": T.gelu, "sigmoid": T.sigmoid, "tanh": lambda t: t.tanh(), "exp": lambda t: t.exp(),
        "log": lambda t: (t * t + 1.0).log(), "sqrt": lambda t: (t * t + 1.0).sqrt(), "pow": lambda t: t ** 3,
        "div": lambda t: 1.0 / (t * t + 2.0), "max": lambda t: t.max(axis=-1), "mean": lambda t: t.mean(axis=0),
        "scale": lambda t: t.scale(-1.5), "index": lambda t: t.reshape(-1)[np.array([0, 2, 2, 7])],
        "transpose": lambda t: t.transpose(1, 0), "concat": lambda t: T.concat([t, t * 2.0], axis=1),
        "stack": lambda t: T.stack([t, -t], axis=0), "where": lambda t: T.where(t.data > 0, t, t * 3.0),
        "clip": lambda t: t.clip(-0.5, 0.5),
    }
    for name, f in unary.items():
        u = _leaf(rng, 3, 4)
        yield name, (_weighted(lambda f=f, u=u: f(u), rng), [("x", u)])

    c1, c2 = _leaf(rng, 3, 5), _leaf(rng, 3, 5)
    yield "cosine", (lambda: T.cosine_similarity(c1, c2).sum(), [("a", c1), ("b", c2)])

    q, k, v = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 4)
    mb, _ = mask_bias(rng.random((3, 5)) < 0.5)
    yield "masked_attention", (_weighted(lambda: attend(q, k, v, bias=mb)[0], rng),
                               [("q", q), ("k", k), ("v", v)])


def loss_cases(rng: np.random.Generator) -> Iterator[tuple[str, Case]]:
    s, t = _leaf(rng, 4, 6), _leaf(rng, 4, 6)
    yield "distillation", (lambda: distillation_loss(s, t, stop_gradient=False), [("student", s), ("teacher", t)])
    parts = _leaf(rng, 2, 4, 6)
    yield "diversity", (lambda: diversity_loss(parts), [("parts", parts)])
    logits = _leaf(rng, 3, 4)
    target = rng.integers(0, 2, size=(3, 4)).astype(float)
    yield "focal", (lambda: focal_visibility_loss(T.sigmoid(logits), target), [("logits", logits)])
    cl = _leaf(rng, 5, 3)
    labels = rng.integers(0, 3, size=5)
    yield "cross_entropy_smoothed", (lambda: cross_entropy(cl, labels, 0.1), [("logits", cl)])

    ids = np.repeat(np.arange(3), 2)
    head = BNNeckHead(6, 3, rng)
    feat = _leaf(rng, 6, 6)
    yield "ce_bnneck", (lambda: ce_bnneck(feat, ids, head, 0.0),
                        [("feature", feat), ("gain", head.gain), ("bias", head.bias),
                         ("classifier", head.classifier)])
    tf = _leaf(rng, 6, 5)
    yield "triplet", (lambda: triplet_batch_hard(tf, ids, 0.3), [("features", tf)])
    tp = _leaf(rng, 6, 3, 4)
    vis = rng.integers(0, 2, size=(6, 3)).astype(float)
    yield "part_triplet", (lambda: part_avg_triplet(tp, vis, ids, 0.3), [("parts", tp)])

    gen = MaskGenerator(3, 5, rng)
    gen.weight.data[...] = rng.normal(size=gen.weight.shape)
    patches = _leaf(rng, 2, 6, 5)
    plabels = rng.integers(0, 4, size=(2, 6))
    yield "parsing", (lambda: parsing_loss(gen(patches), plabels, 0.1), [("patches", patches), ("G", gen.weight)])
    yield "part_pool", (_weighted(lambda: part_pool(patches, gen(patches))[0], rng),
                        [("patches", patches), ("G", gen.weight)])


def _enc_cfg() -> EncoderConfig:
    return EncoderConfig(image_h=8, image_w=8, channels=3, patch_size=4, stride=4, depth=1, heads=2, dim=8,
                         ffn_dim=16, pos_init_std=0.5)


def model_cases(rng: np.random.Generator) -> Iterator[tuple[str, Case]]:
    ecfg = _enc_cfg()
    enc = ViTEncoder(ecfg, rng)
    images = rng.normal(size=(2, 3, 8, 8))
    yield "encoder", (_weighted(lambda: enc(images).patches, rng), list(enc.named_parameters()))

    dcfg = DecoderConfig(parts=3, dim=8, heads=2, ffn_dim=16, layers=2, key_positions=ecfg.num_patches)
    dec = TSDDecoder(dcfg, rng)
    g, pt = _leaf(rng, 2, 8), _leaf(rng, 2, ecfg.num_patches, 8)
    mask = (rng.random((2, 3, ecfg.num_patches)) < 0.5).astype(float)
    mask[0, 0] = 0.0                       # exercises the empty-part fallback
    w = rng.normal(size=(2, 3, 8))

    def tsd():
        s, t = dec(g, pt, mask)
        return (s.parts * Tensor(w)).sum() + (t.parts * Tensor(w[::-1])).sum()
    yield "tsd_forward", (tsd, [("global", g), ("patches", pt)] + list(dec.named_parameters()))

    # whole model, every parameter, one total-loss evaluation per probe; the
    # stop-gradient is lifted so backward() matches the true total derivative
    cfg = variant(RunConfig(encoder=ecfg, parts=3, decoder_layers=2, ids_per_batch=3, instances_per_id=2,
                            distill_stop_gradient=False), "M4")
    model = TSDModel(cfg, num_ids=3, rng=rng)
    ids = np.repeat(np.arange(3), 2)
    batch = rng.normal(size=(6, 3, 8, 8))
    gt = rng.integers(0, 4, size=(6, ecfg.num_patches))
    for name, p in model.named_parameters():
        if "mask_generator" in name:
            p.data[...] = rng.normal(size=p.shape)  # decisive argmax, away from ties
    yield "total_loss", (lambda: model.forward(batch, ids, gt, epoch=0).report.total,
                         list(model.named_parameters()))


def all_cases(seed: int = 0) -> Iterator[tuple[str, Case]]:
    rng = np.random.default_rng(seed)
    yield from op_cases(rng)
    yield from loss_cases(rng)
    yield from model_cases(rng)


def run_suite(seed: int = 0, tol: float = TOLERANCE, eps: float = 1e-5,
              on_case: Callable[[str, list[GradCheckResult]], None] | None = None) -> SuiteResult:
    out = SuiteResult(tol=tol)
    t0 = time.perf_counter()
    for name, (fn, params) in all_cases(seed):
        res = gradcheck(fn, params, eps=eps)
        out.results[name] = res
        if on_case is not None:
            on_case(name, res)
    out.seconds = time.perf_counter() - t0
    return out
