"""Audio-visual embedding network: encoders, cross-attention, projectors, embedding layers."""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import gradcore as gc
from .gradcore import ShapeError, Tensor

MODES = ("both", "audio-only", "visual-only")
MAGIC = b"KDA1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    audio_dim: int = 64
    visual_dim: int = 64
    text_dim: int = 32
    hidden_dim: int = 64
    common_dim: int = 32
    dropout_enc: float = 0.0
    dropout_proj: float = 0.0
    dropout_dec: float = 0.0
    unimodal_mode: str = "both"

    def __post_init__(self):
        for name in ("audio_dim", "visual_dim", "text_dim", "hidden_dim", "common_dim"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("dropout_enc", "dropout_proj", "dropout_dec"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v!r}")
        if self.unimodal_mode not in MODES:
            raise ConfigError(f"unimodal_mode must be one of {MODES}, got {self.unimodal_mode!r}")

    @property
    def fused_dim(self) -> int:
        return 2 * self.hidden_dim if self.unimodal_mode == "both" else self.hidden_dim


def _block_shapes(prefix: str, n_in: int, n_mid: int, n_out: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [
        (f"{prefix}.w1", (n_in, n_mid)),
        (f"{prefix}.b1", (n_mid,)),
        (f"{prefix}.w2", (n_mid, n_out)),
        (f"{prefix}.b2", (n_out,)),
    ]


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Names and shapes of every parameter, in creation order."""
    H = config.hidden_dim
    shapes = []
    shapes += _block_shapes("a_enc", config.audio_dim, H, H)
    shapes += _block_shapes("v_enc", config.visual_dim, H, H)
    shapes += [("attn.wq", (H, H)), ("attn.wk", (H, H)), ("attn.wv", (H, H))]
    shapes += _block_shapes("a_proj", H, H, H)
    shapes += _block_shapes("v_proj", H, H, H)
    shapes += _block_shapes("e_av", config.fused_dim, H, config.common_dim)
    shapes += _block_shapes("e_t", config.text_dim, H, config.common_dim)
    return shapes


@dataclass
class KdaModel:
    config: ModelConfig
    seed: int
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def init_model(config: ModelConfig, seed: int = 0) -> KdaModel:
    """Weights ~ U(-b, b) with b = sqrt(6 / (fan_in + fan_out)); biases zero."""
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in parameter_shapes(config):
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = gc.parameter(data, name=name)
    return KdaModel(config, seed, params)


@dataclass
class ForwardOutput:
    theta_a: Optional[Tensor]
    theta_v: Optional[Tensor]
    theta_av: Tensor
    rho_av: Tensor
    rho_t: Optional[Tensor]


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def _dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


def block(model: KdaModel, prefix: str, x: Tensor, p: float, train: bool, rng) -> Tensor:
    """Linear -> ReLU -> Dropout -> Linear."""
    P = model.params
    h = gc.relu(_linear(x, P[f"{prefix}.w1"], P[f"{prefix}.b1"]))
    h = _dropout(h, p, train, rng)
    return _linear(h, P[f"{prefix}.w2"], P[f"{prefix}.b2"])


def cross_attention(model: KdaModel, theta_a0: Tensor, theta_v0: Tensor, return_weights: bool = False):
    """Single-head attention of each modality token over the {audio, visual} pair, with residual."""
    if theta_a0.shape != theta_v0.shape:
        raise ShapeError(f"cross_attention: audio {theta_a0.shape} vs visual {theta_v0.shape}")
    H = theta_a0.shape[1]
    wq, wk, wv = model["attn.wq"], model["attn.wk"], model["attn.wv"]
    if wq.shape[0] != H:
        raise ShapeError(f"cross_attention: width {H} does not match attention width {wq.shape[0]}")
    inv = 1.0 / math.sqrt(H)
    q = [theta_a0 @ wq, theta_v0 @ wq]
    k = [theta_a0 @ wk, theta_v0 @ wk]
    v = [theta_a0 @ wv, theta_v0 @ wv]
    outs, weights = [], []
    for i, token in enumerate((theta_a0, theta_v0)):
        scores = gc.concat([gc.sum(gc.mul(q[i], kj), axis=1, keepdims=True) for kj in k], axis=1)
        w = gc.softmax(gc.scale(scores, inv), axis=1)
        mixed = gc.mul(gc.column(w, 0), v[0]) + gc.mul(gc.column(w, 1), v[1])
        outs.append(token + mixed)
        weights.append(w)
    if return_weights:
        return outs[0], outs[1], weights
    return outs[0], outs[1]


def _check_width(name: str, x: Tensor, width: int) -> None:
    if x.data.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{name}: expected [B×{width}], got {x.shape}")


def embed_knowledge(model: KdaModel, knowledge: Tensor, train: bool = False, rng=None) -> Tensor:
    _check_width("knowledge", knowledge, model.config.text_dim)
    return block(model, "e_t", knowledge, model.config.dropout_dec, train, rng)


def forward(
    model: KdaModel,
    audio: Optional[Tensor],
    visual: Optional[Tensor],
    knowledge: Optional[Tensor] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ForwardOutput:
    cfg = model.config
    mode = cfg.unimodal_mode
    theta_a = theta_v = None
    if mode in ("both", "audio-only"):
        _check_width("audio", audio, cfg.audio_dim)
        theta_a = block(model, "a_enc", audio, cfg.dropout_enc, train, rng)
    if mode in ("both", "visual-only"):
        _check_width("visual", visual, cfg.visual_dim)
        theta_v = block(model, "v_enc", visual, cfg.dropout_enc, train, rng)
    if mode == "both":
        if audio.shape[0] != visual.shape[0]:
            raise ShapeError(f"batch sizes differ: audio {audio.shape[0]}, visual {visual.shape[0]}")
        theta_a, theta_v = cross_attention(model, theta_a, theta_v)
    if theta_a is not None:
        theta_a = block(model, "a_proj", theta_a, cfg.dropout_proj, train, rng)
    if theta_v is not None:
        theta_v = block(model, "v_proj", theta_v, cfg.dropout_proj, train, rng)
    if mode == "both":
        theta_av = gc.concat([theta_a, theta_v], axis=1)
    else:
        theta_av = theta_a if theta_a is not None else theta_v
    rho_av = block(model, "e_av", theta_av, cfg.dropout_dec, train, rng)
    rho_t = embed_knowledge(model, knowledge, train, rng) if knowledge is not None else None
    return ForwardOutput(theta_a, theta_v, theta_av, rho_av, rho_t)


def class_logits(rho_av: Tensor, rho_t: Tensor) -> Tensor:
    """[B×C] dot products between audio-visual and class embeddings."""
    if rho_av.data.ndim != 2 or rho_t.data.ndim != 2 or rho_av.shape[1] != rho_t.shape[1]:
        raise ShapeError(f"class_logits: widths differ {rho_av.shape} vs {rho_t.shape}")
    return rho_av @ gc.transpose(rho_t)


# -- checkpoint file ---------------------------------------------------------
_INT_FIELDS = ("audio_dim", "visual_dim", "text_dim", "hidden_dim", "common_dim")
_FLOAT_FIELDS = ("dropout_enc", "dropout_proj", "dropout_dec")


def save_checkpoint(model: KdaModel, path) -> None:
    cfg = model.config
    out = bytearray(MAGIC)
    out += struct.pack("<6i", *(getattr(cfg, f) for f in _INT_FIELDS), MODES.index(cfg.unimodal_mode))
    out += struct.pack("<3d", *(getattr(cfg, f) for f in _FLOAT_FIELDS))
    out += struct.pack("<q", model.seed)
    out += struct.pack("<i", len(model.params))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<i", len(raw)) + raw
        out += struct.pack("<i", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}i", *t.shape)
        out += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> KdaModel:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a KDA1 checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    ints = take("<6i")
    floats = take("<3d")
    (seed,) = take("<q")
    kwargs = dict(zip(_INT_FIELDS, ints[:5]))
    kwargs.update(zip(_FLOAT_FIELDS, floats))
    kwargs["unimodal_mode"] = MODES[ints[5]]
    config = ModelConfig(**kwargs)
    expected = dict(parameter_shapes(config))
    (count,) = take("<i")
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for _ in range(count):
        (n,) = take("<i")
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<i")
        shape = take(f"<{rank}i")
        if expected.get(name) != tuple(shape):
            raise ValueError(f"{path}: parameter {name!r} has shape {shape}, config expects {expected.get(name)}")
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        params[name] = gc.parameter(data, name=name)
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return KdaModel(config, seed, params)


def config_fields() -> List[str]:
    return [f.name for f in fields(ModelConfig)]
