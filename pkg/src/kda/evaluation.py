"""Nearest-knowledge inference, GZSL/ZSL metrics and embedding export."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from . import gradcore as gc
from .datahub import Dataset
from .gradcore import DomainError, Tensor
from .model import KdaModel, embed_knowledge, forward


@dataclass(frozen=True)
class EvalResult:
    S: float
    U: float
    HM: float
    ZSL: float

    def line(self) -> str:
        return f"S={100 * self.S:.2f} U={100 * self.U:.2f} HM={100 * self.HM:.2f} ZSL={100 * self.ZSL:.2f}"


@dataclass
class PredictionRecord:
    sample_id: str
    true_class: int
    predicted_class: int
    distances: np.ndarray


def predict(rho_av, class_reps, candidate_ids: Sequence[int], sample_ids=None, true_classes=None) -> List[PredictionRecord]:
    """Assign each row of ``rho_av`` to the candidate with the nearest representative.

    Ties go to the lowest class id.
    """
    Z = rho_av.data if isinstance(rho_av, Tensor) else np.asarray(rho_av, dtype=np.float64)
    R = class_reps.data if isinstance(class_reps, Tensor) else np.asarray(class_reps, dtype=np.float64)
    cands = np.asarray(candidate_ids, dtype=np.int64)
    if cands.size == 0:
        raise DomainError("empty candidate set")
    if R.shape[0] != cands.size:
        raise ValueError(f"{R.shape[0]} class representatives for {cands.size} candidates")
    Z = np.atleast_2d(Z)
    R = R.reshape(cands.size, -1)
    dist = np.sqrt(((Z[:, None, :] - R[None, :, :]) ** 2).sum(axis=2))
    # order candidates by id so argmin's first-hit rule is the lowest-id tie-break
    order = np.argsort(cands, kind="stable")
    best = order[np.argmin(dist[:, order], axis=1)]
    n = Z.shape[0]
    sample_ids = sample_ids if sample_ids is not None else [str(i) for i in range(n)]
    true_classes = true_classes if true_classes is not None else [-1] * n
    return [PredictionRecord(sample_ids[i], int(true_classes[i]), int(cands[best[i]]), dist[i]) for i in range(n)]


def mean_class_accuracy(preds: Iterable[PredictionRecord], class_set: Iterable[int]) -> float:
    """Unweighted mean over ``class_set`` of per-class accuracy."""
    hits: Dict[int, int] = {}
    totals: Dict[int, int] = {}
    for p in preds:
        totals[p.true_class] = totals.get(p.true_class, 0) + 1
        hits[p.true_class] = hits.get(p.true_class, 0) + int(p.predicted_class == p.true_class)
    classes = sorted(set(class_set))
    if not classes:
        raise DomainError("empty class set")
    accs = []
    for c in classes:
        if totals.get(c, 0) == 0:
            raise DomainError(f"class {c} has no test samples")
        accs.append(hits[c] / totals[c])
    return float(np.mean(accs))


def harmonic_mean(S: float, U: float) -> float:
    if S < 0 or U < 0:
        raise DomainError(f"accuracies must be non-negative, got S={S}, U={U}")
    if S + U == 0:
        return 0.0
    return 2.0 * U * S / (U + S)


def class_representatives(model: KdaModel, ds: Dataset, class_ids: Sequence[int]) -> np.ndarray:
    """Mean embedded knowledge vector of each class (eval mode)."""
    with gc.no_grad():
        reps = [embed_knowledge(model, Tensor(k.embeddings)).data.mean(axis=0) for k in ds.knowledge_for(class_ids)]
    return np.stack(reps)


def embed_samples(model: KdaModel, ds: Dataset, ids: Sequence[str], batch_size: int = 512) -> np.ndarray:
    audio, visual, _ = ds.arrays(ids)
    out = []
    with gc.no_grad():
        for start in range(0, len(ids), batch_size):
            sl = slice(start, start + batch_size)
            out.append(forward(model, Tensor(audio[sl]), Tensor(visual[sl])).rho_av.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.common_dim))


def evaluate(model: KdaModel, ds: Dataset, mode: str = "both") -> EvalResult:
    """S and U over seen+unseen candidates, ZSL over unseen candidates only.

    Metrics outside ``mode`` are reported as NaN.
    """
    if mode not in ("gzsl", "zsl", "both"):
        raise ValueError(f"unknown mode {mode!r}")
    sp = ds.split
    all_classes = sorted(set(sp.seen) | set(sp.unseen))
    reps = class_representatives(model, ds, all_classes)
    unseen = sorted(sp.unseen)
    unseen_reps = reps[[all_classes.index(c) for c in unseen]]

    def run(ids, cand, cand_reps):
        _, _, labels = ds.arrays(ids)
        return predict(embed_samples(model, ds, ids), cand_reps, cand, list(ids), labels)

    S = U = HM = ZSL = float("nan")
    if mode in ("gzsl", "both"):
        S = mean_class_accuracy(run(sp.test_seen, all_classes, reps), sp.seen)
        U = mean_class_accuracy(run(sp.test_unseen, all_classes, reps), sp.unseen)
        HM = harmonic_mean(S, U)
    if mode in ("zsl", "both"):
        ZSL = mean_class_accuracy(run(sp.test_unseen, unseen, unseen_reps), sp.unseen)
    return EvalResult(S, U, HM, ZSL)


def heldout_align_loss(model: KdaModel, ds: Dataset) -> float:
    """Alignment loss between all test-sample embeddings and their classes' representatives."""
    from .losses import align_loss

    sp = ds.split
    ids = list(sp.test_seen) + list(sp.test_unseen)
    all_classes = sorted(set(sp.seen) | set(sp.unseen))
    reps = class_representatives(model, ds, all_classes)
    _, _, labels = ds.arrays(ids)
    matched = reps[[all_classes.index(int(c)) for c in labels]]
    with gc.no_grad():
        return align_loss(Tensor(embed_samples(model, ds, ids)), Tensor(matched)).item()


def export_embeddings(model: KdaModel, ds: Dataset, out_path) -> int:
    """Write one line per sample and one per class; returns the row count."""
    ids = [r.id for r in ds.records]
    emb = embed_samples(model, ds, ids)
    class_ids = sorted(k.class_id for k in ds.knowledge)
    reps = class_representatives(model, ds, class_ids)
    lines = [json.dumps({"embedding_dim": model.config.common_dim})]
    for rec, row in zip(ds.records, emb):
        lines.append(json.dumps({"id": rec.id, "class": rec.class_id, "embedding": [float(x) for x in row]}))
    for c, row in zip(class_ids, reps):
        lines.append(json.dumps({"id": f"knowledge:{c}", "class": c, "embedding": [float(x) for x in row], "knowledge": True}))
    path = Path(out_path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write embeddings to {path}: {e.strerror}") from e
    return len(lines) - 1


def load_embeddings(path):
    """Inverse of ``export_embeddings``: (sample rows, knowledge rows) as lists of dicts."""
    samples, knowledge = [], []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            obj = json.loads(line)
            obj["embedding"] = np.array(obj["embedding"], dtype=np.float64)
            (knowledge if obj.get("knowledge") else samples).append(obj)
    return samples, knowledge
