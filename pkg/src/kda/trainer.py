"""Adam, plateau scheduling and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import gradcore as gc
from .datahub import Dataset, batches
from .evaluation import EvalResult, evaluate
from .gradcore import Tensor
from .losses import LossBreakdown, MarginMatrix, compute_margins, kda_objective
from .model import ConfigError, KdaModel, ModelConfig, embed_knowledge, forward, save_checkpoint

log = logging.getLogger(__name__)

LR_FLOOR = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 200
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    plateau_metric: str = "HM"
    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 0.2
    margin_refresh: str = "epoch"
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.plateau_metric not in ("HM", "ZSL", "loss"):
            raise ConfigError(f"unknown plateau_metric {self.plateau_metric!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.lam < 0 or self.alpha < 0:
            raise ConfigError("lam and alpha must be non-negative")
        if self.margin_refresh not in ("epoch", "step"):
            raise ConfigError("margin_refresh must be 'epoch' or 'step'")


# -- Adam ----------------------------------------------------------------------
@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update. Parameters whose gradient is None are left untouched."""
    if not (len(params) == len(grads) == len(state.m)):
        raise gc.ContractError("params, grads and state lengths differ")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise gc.ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- plateau schedule -------------------------------------------------------------
def _plateau_drops(history: Sequence[float], patience: int, higher_is_better: bool) -> List[bool]:
    best = None
    bad = 0
    drops = []
    for x in history:
        improved = best is None or (x > best if higher_is_better else x < best)
        if improved:
            best = x
            bad = 0
        else:
            bad += 1
        if bad >= patience:
            drops.append(True)
            bad = 0
        else:
            drops.append(False)
    return drops


def plateau_schedule(history: Sequence[float], patience: int, factor: float, current_lr: float,
                     higher_is_better: bool = True) -> float:
    """Learning rate to use after the last epoch in ``history``."""
    if history and _plateau_drops(history, patience, higher_is_better)[-1]:
        return current_lr * factor
    return current_lr


def replay_lr_trace(history: Sequence[float], lr0: float, patience: int, factor: float,
                    higher_is_better: bool = True) -> List[float]:
    """Learning rate in effect during each epoch, given the per-epoch metric history."""
    trace = []
    lr = lr0
    for drop in _plateau_drops(history, patience, higher_is_better):
        trace.append(lr)
        if drop:
            lr *= factor
    return trace


# -- training loop ------------------------------------------------------------------
@dataclass
class EpochLog:
    epoch: int
    kaml: float
    align: float
    total: float
    result: EvalResult
    lr: float


@dataclass
class TrainReport:
    epochs: List[EpochLog] = field(default_factory=list)
    best_checkpoint: Optional[str] = None
    best_epoch: int = 0
    seconds: float = 0.0

    @property
    def lr_trace(self) -> List[float]:
        return [e.lr for e in self.epochs]

    def metric_history(self, metric: str) -> List[float]:
        if metric == "loss":
            return [e.total for e in self.epochs]
        return [getattr(e.result, metric) for e in self.epochs]

    def write_metrics(self, path) -> None:
        lines = ["epoch,kaml,align,total,S,U,HM,ZSL,lr"]
        for e in self.epochs:
            r = e.result
            lines.append(f"{e.epoch},{e.kaml!r},{e.align!r},{e.total!r},{r.S!r},{r.U!r},{r.HM!r},{r.ZSL!r},{e.lr!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class _Knowledge:
    """Stacked description embeddings for a fixed class list plus the per-class averaging matrix."""

    def __init__(self, ds: Dataset, class_ids: Sequence[int]):
        entries = ds.knowledge_for(class_ids)
        self.rows = Tensor(np.concatenate([k.embeddings for k in entries]))
        self.sizes = [k.embeddings.shape[0] for k in entries]
        avg = np.zeros((len(entries), sum(self.sizes)))
        start = 0
        for i, n in enumerate(self.sizes):
            avg[i, start : start + n] = 1.0 / n
            start += n
        self.avg = Tensor(avg)

    def class_reps(self, model: KdaModel, train: bool, rng) -> Tensor:
        return gc.matmul(self.avg, embed_knowledge(model, self.rows, train, rng))

    def margins(self, model: KdaModel, alpha: float, beta: float) -> MarginMatrix:
        with gc.no_grad():
            emb = embed_knowledge(model, self.rows).data
        parts = np.split(emb, np.cumsum(self.sizes)[:-1])
        return compute_margins([Tensor(p) for p in parts], alpha, beta)


def training_loss(model: KdaModel, audio: np.ndarray, visual: np.ndarray, labels: np.ndarray,
                  know: _Knowledge, margins: MarginMatrix, lam: float, train: bool = False,
                  rng: Optional[np.random.Generator] = None) -> LossBreakdown:
    out = forward(model, Tensor(audio), Tensor(visual), None, train, rng)
    out = replace(out, rho_t=know.class_reps(model, train, rng))
    return kda_objective(out, labels, margins, lam)


def fit(model: KdaModel, ds: Dataset, config: TrainConfig, checkpoint_path=None,
        restore_best: bool = True) -> TrainReport:
    """Train on the seen-class partition, evaluating GZSL metrics after every epoch."""
    t0 = time.perf_counter()
    seen = sorted(ds.split.seen)
    label_of = {c: i for i, c in enumerate(seen)}
    audio, visual, classes = ds.arrays(ds.split.train)
    labels = np.array([label_of[int(c)] for c in classes], dtype=np.int64)
    know = _Knowledge(ds, seen)
    params = model.parameters()
    state = AdamState.for_params(params)
    dropout_rng = np.random.default_rng([config.seed, 1])
    higher = config.plateau_metric != "loss"
    lr = config.lr
    report = TrainReport()
    best_score = -math.inf
    best_state: Optional[Dict[str, np.ndarray]] = None

    for epoch in range(1, config.max_epochs + 1):
        margins = know.margins(model, config.alpha, config.beta)
        sums = np.zeros(3)
        n_batches = 0
        for b, idx in enumerate(batches(len(labels), config.batch_size, seed=config.seed * 100003 + epoch)):
            if config.margin_refresh == "step" and b > 0:
                margins = know.margins(model, config.alpha, config.beta)
            model.zero_grad()
            losses = training_loss(model, audio[idx], visual[idx], labels[idx], know, margins,
                                   config.lam, train=True, rng=dropout_rng)
            vals = losses.values()
            for name, v in vals.items():
                if not math.isfinite(v):
                    raise TrainingError(f"non-finite {name} loss ({v}) at epoch {epoch}, batch {b}")
            gc.backward(losses.total)
            adam_step(params, [p.grad for p in params], state, lr, config.beta1, config.beta2, config.eps)
            sums += (vals["kaml"], vals["align"], vals["total"])
            n_batches += 1
        if n_batches == 0:
            raise TrainingError("training partition yields no batch of size >= 2")
        kaml, align, total = (float(v) for v in sums / n_batches)
        result = evaluate(model, ds)
        report.epochs.append(EpochLog(epoch, kaml, align, total, result, lr))
        log.info("epoch %d kaml=%.5f align=%.5f total=%.5f %s lr=%.3g", epoch, kaml, align, total, result.line(), lr)

        if result.HM > best_score:
            best_score = result.HM
            best_state = model.state()
            report.best_epoch = epoch
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
                report.best_checkpoint = str(checkpoint_path)

        lr = plateau_schedule(report.metric_history(config.plateau_metric), config.plateau_patience,
                              config.plateau_factor, lr, higher)
        if lr < LR_FLOOR:
            log.info("learning rate %.3g below floor; stopping", lr)
            break

    if restore_best and best_state is not None:
        model.load_state(best_state)
    report.seconds = time.perf_counter() - t0
    return report


# -- run configuration files -------------------------------------------------------------
def parse_kv(text: str, source: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(cls, values: Dict[str, str], source: str):
    kwargs = {}
    for f in fields(cls):
        if f.name in values:
            raw = values[f.name]
            typ = type(f.default)
            try:
                kwargs[f.name] = int(raw) if typ is int else float(raw) if typ is float else raw
            except ValueError:
                raise ConfigError(f"{source}: {f.name} = {raw!r} is not a valid {typ.__name__}") from None
    return cls(**kwargs)


def load_run_config(path):
    """Read a ``key = value`` file into (TrainConfig, model-config overrides)."""
    text = Path(path).read_text(encoding="utf-8")
    values = parse_kv(text, str(path))
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    train_keys = {f.name for f in fields(TrainConfig)}
    model_keys = {f.name for f in fields(ModelConfig)} - {"audio_dim", "visual_dim", "text_dim"}
    unknown = set(values) - train_keys - model_keys
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    tc = _coerce(TrainConfig, {k: v for k, v in values.items() if k in train_keys}, str(path))
    model_over = {}
    for k in model_keys & set(values):
        typ = type(ModelConfig.__dataclass_fields__[k].default)
        try:
            model_over[k] = typ(values[k])
        except ValueError:
            raise ConfigError(f"{path}: {k} = {values[k]!r} is not a valid {typ.__name__}") from None
    return tc, model_over
