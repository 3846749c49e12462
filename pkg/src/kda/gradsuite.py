"""Finite-difference checks over every differentiable op and the composite losses."""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import gradcore as gc
from .gradcore import GradCheckReport, Tensor
from .losses import compute_margins, align_loss, kaml_loss, kda_objective
from .model import ModelConfig, forward, init_model, cross_attention
from .trainer import _Knowledge
from .datahub import SynthConfig, generate_synthetic

TINY = ModelConfig(audio_dim=6, visual_dim=5, text_dim=4, hidden_dim=4, common_dim=3)


def _p(rng, *shape, lo=-2.0, hi=2.0, name=""):
    return gc.parameter(rng.uniform(lo, hi, size=shape), name=name)


def op_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]]:
    """Scalar-valued probes, one per op, at a random point with entries in [-2, 2]."""
    a, b = _p(rng, 3, 4, name="a"), _p(rng, 4, 2, name="b")
    x, y = _p(rng, 3, 4, name="x"), _p(rng, 3, 4, name="y")
    pos = _p(rng, 3, 4, lo=0.1, hi=2.0, name="pos")
    w = Tensor(rng.uniform(-2, 2, size=(3, 4)))  # fixed weights make sum-probes non-trivial
    logits = _p(rng, 5, name="logits")
    margins = Tensor(rng.uniform(0, 2, size=5))
    batch_logits = _p(rng, 4, 5, name="batch_logits")
    labels = rng.integers(0, 5, size=4)
    row_margins = rng.uniform(0, 2, size=(4, 5))
    stats_in = _p(rng, 5, 3, name="batch")
    r = _p(rng, 1, 4, name="r")

    def wsum(t):
        return gc.sum(gc.mul(t, w))

    def stats_probe():
        mu, var = gc.reduce_stats(stats_in)
        return gc.sum(gc.mul(mu, Tensor([1.0, -2.0, 0.5]))) + gc.sum(gc.mul(var, Tensor([0.3, 1.0, -1.5])))

    return {
        "matmul": (lambda: gc.sum(gc.square(gc.matmul(a, b))), [a, b]),
        "add": (lambda: wsum(gc.square(gc.add(x, y))), [x, y]),
        "sub": (lambda: wsum(gc.square(gc.sub(x, y))), [x, y]),
        "mul": (lambda: wsum(gc.mul(x, y)), [x, y]),
        "broadcast_add": (lambda: wsum(gc.square(gc.add(x, r))), [x, r]),
        "relu": (lambda: wsum(gc.relu(x)), [x]),
        "sqrt": (lambda: wsum(gc.sqrt(pos)), [pos]),
        "square": (lambda: wsum(gc.square(x)), [x]),
        "scale": (lambda: wsum(gc.scale(x, -1.7)), [x]),
        "exp": (lambda: wsum(gc.exp(gc.scale(x, 0.5))), [x]),
        "softmax": (lambda: wsum(gc.softmax(x, axis=1)), [x]),
        "concat": (lambda: gc.sum(gc.square(gc.concat([x, y], axis=1))), [x, y]),
        "take_rows": (lambda: gc.sum(gc.square(gc.take_rows(x, [2, 0, 2]))), [x]),
        "column": (lambda: gc.sum(gc.square(gc.column(x, 1))), [x]),
        "transpose": (lambda: gc.sum(gc.square(gc.matmul(gc.transpose(a), a))), [a]),
        "mean": (lambda: gc.sum(gc.square(gc.mean(x, axis=0))), [x]),
        "reduce_stats": (stats_probe, [stats_in]),
        "softmax_cross_entropy": (lambda: gc.softmax_cross_entropy(logits, 1, margins), [logits]),
        "batch_cross_entropy": (lambda: gc.batch_cross_entropy(batch_logits, labels, row_margins), [batch_logits]),
    }


def loss_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]]:
    rho_av = _p(rng, 6, 3, name="rho_av")
    rho_t = _p(rng, 6, 3, name="rho_t")
    logits = _p(rng, 6, 4, name="logits")
    labels = rng.integers(0, 4, size=6)
    margins = compute_margins([Tensor(rng.uniform(-2, 2, size=(3, 3))) for _ in range(4)], 1.0, 0.2)
    return {
        "align_loss": (lambda: align_loss(rho_av, rho_t), [rho_av, rho_t]),
        "kaml_loss": (lambda: kaml_loss(logits, labels, margins), [logits]),
    }


def model_case(seed: int):
    """Full objective through a tiny model on a tiny synthetic dataset, dropout off."""
    ds = generate_synthetic(SynthConfig(seen_count=3, unseen_count=1, samples_per_class=3,
                                        audio_dim=TINY.audio_dim, visual_dim=TINY.visual_dim,
                                        text_dim=TINY.text_dim, latent_dim=2, seed=seed))
    model = init_model(TINY, seed)
    # push parameters away from the tiny init scale so every path carries signal
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data[...] = rng.uniform(-1.0, 1.0, size=p.shape)
    seen = sorted(ds.split.seen)
    ids = ds.split.train[:4]
    audio, visual, classes = ds.arrays(ids)
    labels = np.array([seen.index(int(c)) for c in classes])
    know = _Knowledge(ds, seen)
    margins = know.margins(model, 1.0, 0.2)

    def f():
        from dataclasses import replace

        out = forward(model, Tensor(audio), Tensor(visual))
        out = replace(out, rho_t=know.class_reps(model, False, None))
        return kda_objective(out, labels, margins, 1.0).total

    return f, model


def attention_case(rng: np.random.Generator):
    model = init_model(ModelConfig(audio_dim=3, visual_dim=3, text_dim=3, hidden_dim=4, common_dim=3),
                       int(rng.integers(1 << 30)))
    a0, v0 = _p(rng, 3, 4, name="theta_a0"), _p(rng, 3, 4, name="theta_v0")
    w = Tensor(rng.uniform(-2, 2, size=(3, 4)))
    params = [a0, v0, model["attn.wq"], model["attn.wk"], model["attn.wv"]]

    def f():
        ta, tv = cross_attention(model, a0, v0)
        return gc.sum(gc.mul(ta, w)) + gc.sum(gc.square(tv))

    return f, params


def run_suite(seeds=range(20), step: float = 1e-5, model_entries: int = 6) -> List[Tuple[str, int, GradCheckReport]]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (f, params) in {**op_cases(rng), **loss_cases(rng)}.items():
            results.append((name, seed, gc.finite_difference_check(f, params, step)))
        f, params = attention_case(rng)
        results.append(("cross_attention", seed, gc.finite_difference_check(f, params, step)))
        f, model = model_case(seed)
        names = list(model.params)
        results.append(("kda_objective", seed, gc.finite_difference_check(
            f, model.parameters(), step, max_entries=model_entries, rng=rng, names=names)))
    return results
