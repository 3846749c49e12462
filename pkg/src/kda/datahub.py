"""Feature/knowledge file ingestion, GZSL splits and a synthetic dataset generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class FeatureRecord:
    id: str
    class_id: int
    audio: np.ndarray
    visual: np.ndarray


@dataclass
class ClassKnowledge:
    class_id: int
    name: str
    embeddings: np.ndarray  # [K × text_dim]


@dataclass
class GzslSplit:
    seen: List[int]
    unseen: List[int]
    train: List[str]
    test_seen: List[str]
    test_unseen: List[str]

    def partition(self, name: str) -> List[str]:
        return {"train": self.train, "test_seen": self.test_seen, "test_unseen": self.test_unseen}[name]


@dataclass
class Dataset:
    records: List[FeatureRecord]
    knowledge: List[ClassKnowledge]
    split: GzslSplit
    audio_dim: int
    visual_dim: int
    text_dim: int
    _by_id: Dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {r.id: i for i, r in enumerate(self.records)}

    def index_of(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self._by_id[i] for i in ids], dtype=np.int64)

    def arrays(self, ids: Sequence[str]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.index_of(ids)
        audio = np.stack([self.records[i].audio for i in idx]) if len(idx) else np.zeros((0, self.audio_dim))
        visual = np.stack([self.records[i].visual for i in idx]) if len(idx) else np.zeros((0, self.visual_dim))
        labels = np.array([self.records[i].class_id for i in idx], dtype=np.int64)
        return audio, visual, labels

    def knowledge_for(self, class_ids: Sequence[int]) -> List[ClassKnowledge]:
        table = {k.class_id: k for k in self.knowledge}
        return [table[c] for c in class_ids]


@dataclass(frozen=True)
class SynthConfig:
    seen_count: int = 5
    unseen_count: int = 3
    samples_per_class: int = 100
    audio_dim: int = 64
    visual_dim: int = 64
    text_dim: int = 32
    latent_dim: int = 4
    cluster_spread: float = 0.1
    modality_noise: float = 0.1
    descriptions_per_class: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("seen_count", "unseen_count", "samples_per_class", "audio_dim", "visual_dim",
                     "text_dim", "latent_dim", "descriptions_per_class"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.cluster_spread < 0 or self.modality_noise < 0:
            raise ValidationError("cluster_spread and modality_noise must be >= 0")


# -- validation ---------------------------------------------------------------
def validate(ds: Dataset) -> None:
    """Raise ValidationError naming the first broken rule."""
    classes = {}
    for k in ds.knowledge:
        if k.class_id in classes:
            raise ValidationError(f"class {k.class_id} has more than one knowledge entry")
        if k.embeddings.ndim != 2 or k.embeddings.shape[0] < 1:
            raise ValidationError(f"class {k.class_id} needs at least one description embedding")
        if k.embeddings.shape[1] != ds.text_dim:
            raise ValidationError(f"class {k.class_id} embedding width {k.embeddings.shape[1]} != text_dim {ds.text_dim}")
        classes[k.class_id] = k
    ids = set()
    for r in ds.records:
        if r.id in ids:
            raise ValidationError(f"duplicate sample id {r.id!r}")
        ids.add(r.id)
        if r.audio.shape != (ds.audio_dim,) or r.visual.shape != (ds.visual_dim,):
            raise ValidationError(f"sample {r.id!r} vector lengths do not match header dims")
        if r.class_id not in classes:
            raise ValidationError(f"sample {r.id!r} references class {r.class_id} with no knowledge entry")
    sp = ds.split
    seen, unseen = set(sp.seen), set(sp.unseen)
    if not seen:
        raise ValidationError("seen class set is empty")
    if not unseen:
        raise ValidationError("unseen class set is empty")
    if seen & unseen:
        raise ValidationError(f"classes {sorted(seen & unseen)} are both seen and unseen")
    for c in seen | unseen:
        if c not in classes:
            raise ValidationError(f"split class {c} has no knowledge entry")
    by_id = {r.id: r for r in ds.records}
    owner: Dict[str, str] = {}
    for part, allowed in (("train", seen), ("test_seen", seen), ("test_unseen", unseen)):
        for sid in sp.partition(part):
            if sid in owner:
                raise ValidationError(f"sample {sid!r} appears in both {owner[sid]} and {part}")
            owner[sid] = part
            if sid not in by_id:
                raise ValidationError(f"{part} references unknown sample {sid!r}")
            if by_id[sid].class_id not in allowed:
                raise ValidationError(f"{part} sample {sid!r} has class {by_id[sid].class_id} outside its class set")


# -- file formats -------------------------------------------------------------
def _dump(obj) -> str:
    return json.dumps(obj, separators=(", ", ": "), allow_nan=False)


def _floats(values) -> List[float]:
    return [float(v) for v in values]


def _parse_lines(path: Path) -> Iterator[Tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: {e.msg}") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _int(obj: dict, key: str, where: str) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (isinstance(v, float) and not v.is_integer()):
        raise ParseError(f"{where}: {key!r} must be an integer, got {v!r}")
    return int(v)


def _vector(obj: dict, key: str, where: str) -> np.ndarray:
    v = obj.get(key)
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ParseError(f"{where}: {key!r} must be an array of numbers")
    return np.array(v, dtype=np.float64)


def save_features(path, records: Sequence[FeatureRecord], audio_dim: int, visual_dim: int) -> None:
    lines = [_dump({"audio_dim": audio_dim, "visual_dim": visual_dim})]
    for r in records:
        lines.append(_dump({"id": r.id, "class": r.class_id, "audio": _floats(r.audio), "visual": _floats(r.visual)}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_knowledge(path, knowledge: Sequence[ClassKnowledge], text_dim: int) -> None:
    lines = [_dump({"text_dim": text_dim})]
    for k in knowledge:
        lines.append(_dump({"class": k.class_id, "name": k.name,
                            "embeddings": [_floats(row) for row in k.embeddings]}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_split(path, split: GzslSplit) -> None:
    obj = {"seen": split.seen, "unseen": split.unseen, "train": split.train,
           "test_seen": split.test_seen, "test_unseen": split.test_unseen}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def save_dataset(ds: Dataset, features_path, knowledge_path, split_path) -> None:
    save_features(features_path, ds.records, ds.audio_dim, ds.visual_dim)
    save_knowledge(knowledge_path, ds.knowledge, ds.text_dim)
    save_split(split_path, ds.split)


def load_features(path) -> Tuple[List[FeatureRecord], int, int]:
    path = Path(path)
    header = None
    records = []
    for lineno, obj in _parse_lines(path):
        where = f"{path}:{lineno}"
        if header is None:
            header = (_int(obj, "audio_dim", where), _int(obj, "visual_dim", where))
            continue
        rid = obj.get("id")
        if not isinstance(rid, str):
            raise ParseError(f"{where}: 'id' must be a string")
        records.append(FeatureRecord(rid, _int(obj, "class", where), _vector(obj, "audio", where), _vector(obj, "visual", where)))
    if header is None:
        raise ParseError(f"{path}: missing header line")
    return records, header[0], header[1]


def load_knowledge(path) -> Tuple[List[ClassKnowledge], int]:
    path = Path(path)
    text_dim = None
    out = []
    for lineno, obj in _parse_lines(path):
        where = f"{path}:{lineno}"
        if text_dim is None:
            text_dim = _int(obj, "text_dim", where)
            continue
        name = obj.get("name")
        if not isinstance(name, str):
            raise ParseError(f"{where}: 'name' must be a string")
        rows = obj.get("embeddings")
        if not isinstance(rows, list) or not rows:
            raise ParseError(f"{where}: 'embeddings' must be a non-empty array of arrays")
        mat = [_vector({"e": r}, "e", where) for r in rows]
        if len({len(m) for m in mat}) != 1:
            raise ParseError(f"{where}: embeddings have unequal lengths")
        out.append(ClassKnowledge(_int(obj, "class", where), name, np.stack(mat)))
    if text_dim is None:
        raise ParseError(f"{path}: missing header line")
    return out, text_dim


def load_split(path) -> GzslSplit:
    path = Path(path)
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}: {e.msg}") from None
    missing = [k for k in ("seen", "unseen", "train", "test_seen", "test_unseen") if k not in obj]
    if missing:
        raise ParseError(f"{path}: missing keys {missing}")
    classes = {k: [_int({"v": v}, "v", f"{path} {k}") for v in obj[k]] for k in ("seen", "unseen")}
    samples = {}
    for k in ("train", "test_seen", "test_unseen"):
        if not all(isinstance(v, str) for v in obj[k]):
            raise ParseError(f"{path}: {k} must list string sample ids")
        samples[k] = list(obj[k])
    return GzslSplit(classes["seen"], classes["unseen"], samples["train"], samples["test_seen"], samples["test_unseen"])


def load_dataset(features_path, knowledge_path, split_path) -> Dataset:
    records, a_dim, v_dim = load_features(features_path)
    knowledge, t_dim = load_knowledge(knowledge_path)
    ds = Dataset(records, knowledge, load_split(split_path), a_dim, v_dim, t_dim)
    validate(ds)
    return ds


# -- synthetic data ---------------------------------------------------------------
def _prototypes(rng: np.random.Generator, n_seen: int, n_unseen: int, dim: int) -> np.ndarray:
    """Seen prototypes ~ N(0, I); unseen ones are convex mixtures of seen prototypes.

    A mixture is redrawn while it sits closer than half the median seen-seen
    distance to an existing prototype.
    """
    seen = rng.standard_normal((n_seen, dim))
    if n_seen > 1:
        gaps = np.linalg.norm(seen[:, None] - seen[None], axis=2)[np.triu_indices(n_seen, 1)]
        min_gap = 0.5 * float(np.median(gaps))
    else:
        min_gap = 0.0
    protos = list(seen)
    for _ in range(n_unseen):
        for _attempt in range(1000):
            cand = rng.dirichlet(np.ones(n_seen)) @ seen if n_seen > 1 else seen[0] + rng.standard_normal(dim)
            if min(np.linalg.norm(cand - p) for p in protos) >= min_gap:
                break
        protos.append(cand)
    return np.stack(protos)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Classes share one latent prototype across audio, visual and text.

    Each modality is a fixed random linear image of the latent space; samples
    add Gaussian noise of scale ``modality_noise`` and each class gets
    ``descriptions_per_class`` knowledge vectors jittered by ``cluster_spread``.
    Class ids 0..seen-1 are seen, the rest unseen.
    """
    rng = np.random.default_rng(config.seed)
    L = config.latent_dim
    n_classes = config.seen_count + config.unseen_count
    protos = _prototypes(rng, config.seen_count, config.unseen_count, L)
    maps = {
        name: rng.standard_normal((L, dim)) / math.sqrt(L)
        for name, dim in (("audio", config.audio_dim), ("visual", config.visual_dim), ("text", config.text_dim))
    }
    records: List[FeatureRecord] = []
    knowledge: List[ClassKnowledge] = []
    by_class: Dict[int, List[str]] = {}
    for c in range(n_classes):
        z = protos[c]
        base_t = z @ maps["text"]
        emb = base_t + config.cluster_spread * rng.standard_normal((config.descriptions_per_class, config.text_dim))
        knowledge.append(ClassKnowledge(c, f"class_{c:03d}", emb))
        base_a, base_v = z @ maps["audio"], z @ maps["visual"]
        for i in range(config.samples_per_class):
            rid = f"c{c:03d}_s{i:04d}"
            a = base_a + config.modality_noise * rng.standard_normal(config.audio_dim)
            v = base_v + config.modality_noise * rng.standard_normal(config.visual_dim)
            records.append(FeatureRecord(rid, c, a, v))
            by_class.setdefault(c, []).append(rid)
    seen = list(range(config.seen_count))
    unseen = list(range(config.seen_count, n_classes))
    train, test_seen, test_unseen = [], [], []
    for c in seen:
        ids = list(by_class[c])
        order = rng.permutation(len(ids))
        n_test = max(1, int(round(0.2 * len(ids)))) if len(ids) > 1 else 0
        test_seen += [ids[i] for i in sorted(order[:n_test])]
        train += [ids[i] for i in sorted(order[n_test:])]
    for c in unseen:
        test_unseen += by_class[c]
    ds = Dataset(records, knowledge, GzslSplit(seen, unseen, train, test_seen, test_unseen),
                 config.audio_dim, config.visual_dim, config.text_dim)
    validate(ds)
    return ds


def batches(n: int, batch_size: int, seed: Optional[int] = None, train: bool = True) -> Iterator[np.ndarray]:
    """Index batches over a partition of ``n`` samples.

    A ``seed`` shuffles deterministically. In train mode a trailing batch
    smaller than 2 is dropped; in eval mode it is kept.
    """
    if n <= 0:
        raise ValueError("empty partition")
    if batch_size < (2 if train else 1):
        raise ValueError(f"batch size {batch_size} too small")
    order = np.random.default_rng(seed).permutation(n) if seed is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if train and len(idx) < 2:
            continue
        yield idx
