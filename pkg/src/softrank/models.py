"""Toy encoder classifier and MLP whose linear layers can be swapped for low-rank ones.

Linear layers live in a :class:`LayerRegistry` keyed by path. Encoder paths
are ``block/<i>/<slot>`` with slot one of ``W_Q W_K W_V W_proj W_fc1 W_fc2``,
plus ``head`` for the classifier. MLP paths are ``layer/<i>`` and ``head``.
"""

from __future__ import annotations

import fnmatch
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from . import ndcore as nd
from .data import PAD
from .lowrank import DecomposedLinear, DenseLinear, Linear, MergedLinear, decompose, param_count
from .ndcore import ContractError, DimensionError, Tensor

SLOTS = ("W_Q", "W_K", "W_V", "W_proj", "W_fc1", "W_fc2")
ATTN_SLOTS = SLOTS[:4]
FFN_SLOTS = SLOTS[4:]
MASK_VALUE = -1e9


class LayerRegistry:
    """Ordered map from layer path to linear layer."""

    def __init__(self, layers: Optional[Iterable[tuple[str, Linear]]] = None, compressible: Iterable[str] = ()):
        self._layers: "OrderedDict[str, Linear]" = OrderedDict(layers or ())
        self.compressible = [p for p in compressible if p in self._layers]

    def __getitem__(self, path: str) -> Linear:
        try:
            return self._layers[path]
        except KeyError:
            raise KeyError(f"unknown layer path {path!r}; valid paths: {list(self._layers)}") from None

    def __setitem__(self, path: str, layer: Linear) -> None:
        if path not in self._layers:
            raise KeyError(f"unknown layer path {path!r}; valid paths: {list(self._layers)}")
        old = self._layers[path]
        if old.shape != layer.shape:
            raise DimensionError(f"{path}: replacement shape {layer.shape} != {old.shape}")
        self._layers[path] = layer

    def __contains__(self, path: str) -> bool:
        return path in self._layers

    def __iter__(self) -> Iterator[str]:
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def items(self):
        return self._layers.items()

    def paths(self) -> list[str]:
        return list(self._layers)

    def decomposed(self) -> list[tuple[str, DecomposedLinear]]:
        return [(p, l) for p, l in self._layers.items() if isinstance(l, DecomposedLinear)]

    def compressed_total(self, mode: str = "merged", eps: float = 1e-8) -> int:
        return sum(param_count(self._layers[p], mode, eps) for p in self.compressible)

    def dense_total(self) -> int:
        return sum(param_count(self._layers[p], "dense") for p in self.compressible)


# ---------------------------------------------------------------- helpers


def _init_linear(rng: np.random.Generator, m: int, n: int, bias: bool = True) -> DenseLinear:
    bound = 1.0 / math.sqrt(n)
    w = rng.uniform(-bound, bound, size=(m, n))
    b = np.zeros(m) if bias else None
    return DenseLinear(w, b)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    ``mask`` is an additive constant broadcast onto the scores (e.g. -1e9 on
    padded keys).
    """
    if q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(f"attention: q{q.shape} k{k.shape} v{v.shape} must match")
    d_k = q.shape[-1]
    scores = nd.scale(q @ nd.swapaxes(k, -1, -2), 1.0 / math.sqrt(d_k))
    if mask is not None:
        scores = scores + Tensor(mask)
    return nd.softmax_rows(scores) @ v


# ---------------------------------------------------------------- encoder


@dataclass
class EncoderConfig:
    n_blocks: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: Optional[int] = None
    vocab_size: int = 32
    max_seq_len: int = 32
    n_classes: int = 2
    norm: str = "post"

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.norm not in ("post", "pre"):
            raise ContractError(f"norm must be 'post' or 'pre', got {self.norm!r}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class Encoder:
    kind = "encoder"

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.tok_emb = nd.parameter(rng.normal(0.0, 0.1, size=(cfg.vocab_size, d)))
        self.pos_emb = nd.parameter(rng.normal(0.0, 0.1, size=(cfg.max_seq_len, d)))
        self.norms: list[dict[str, Tensor]] = []
        layers = []
        for i in range(cfg.n_blocks):
            shapes = {"W_Q": (d, d), "W_K": (d, d), "W_V": (d, d), "W_proj": (d, d), "W_fc1": (cfg.d_ff, d), "W_fc2": (d, cfg.d_ff)}
            for slot in SLOTS:
                layers.append((f"block/{i}/{slot}", _init_linear(rng, *shapes[slot])))
            self.norms.append(
                {
                    "ln1_g": nd.parameter(np.ones(d)),
                    "ln1_b": nd.parameter(np.zeros(d)),
                    "ln2_g": nd.parameter(np.ones(d)),
                    "ln2_b": nd.parameter(np.zeros(d)),
                }
            )
        layers.append(("head", _init_linear(rng, cfg.n_classes, d)))
        self.registry = LayerRegistry(layers, [p for p, _ in layers if p != "head"])

    def _heads(self, x: Tensor, b: int, l: int) -> Tensor:
        h, dk = self.cfg.n_heads, self.cfg.d_k
        return nd.swapaxes(nd.reshape(x, (b, l, h, dk)), 1, 2)

    def _block(self, i: int, x: Tensor, mask: np.ndarray) -> Tensor:
        reg, ln, cfg = self.registry, self.norms[i], self.cfg
        b, l, d = x.shape
        pre = cfg.norm == "pre"

        a_in = nd.layer_norm(x, ln["ln1_g"], ln["ln1_b"]) if pre else x
        q = self._heads(reg[f"block/{i}/W_Q"](a_in), b, l)
        k = self._heads(reg[f"block/{i}/W_K"](a_in), b, l)
        v = self._heads(reg[f"block/{i}/W_V"](a_in), b, l)
        ctx = nd.reshape(nd.swapaxes(attention(q, k, v, mask), 1, 2), (b, l, d))
        x = x + reg[f"block/{i}/W_proj"](ctx)
        if not pre:
            x = nd.layer_norm(x, ln["ln1_g"], ln["ln1_b"])

        f_in = nd.layer_norm(x, ln["ln2_g"], ln["ln2_b"]) if pre else x
        f = reg[f"block/{i}/W_fc2"](nd.gelu(reg[f"block/{i}/W_fc1"](f_in)))
        x = x + f
        if not pre:
            x = nd.layer_norm(x, ln["ln2_g"], ln["ln2_b"])
        return x

    def forward(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DimensionError(f"token ids must be [B, L], got shape {ids.shape}")
        b, l = ids.shape
        if l > self.cfg.max_seq_len:
            raise ContractError(f"sequence length {l} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ContractError(f"token id out of range [0, {self.cfg.vocab_size})")
        valid = ids != PAD
        # rows that are all padding still attend somewhere and pool over every position
        empty = ~valid.any(axis=1)
        valid[empty] = True
        mask = np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]

        x = nd.take_rows(self.tok_emb, ids) + nd.take_rows(self.pos_emb, np.arange(l))
        for i in range(self.cfg.n_blocks):
            x = self._block(i, x, mask)
        weights = valid / valid.sum(axis=1, keepdims=True)
        pooled = nd.reshape(Tensor(weights[:, None, :]) @ x, (b, self.cfg.d_model))
        return self.registry["head"](pooled)

    __call__ = forward

    def extra_parameters(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, ln in enumerate(self.norms):
            for name, t in ln.items():
                out[f"block/{i}/{name}"] = t
        return out

    def topology(self) -> dict:
        return {"kind": self.kind, "config": self.cfg.to_dict()}


def encoder_forward(cfg: EncoderConfig, registry: LayerRegistry, ids, model: Optional[Encoder] = None) -> Tensor:
    """Functional entry point; ``model`` supplies embeddings and norms."""
    if model is None or model.cfg != cfg:
        raise ContractError("encoder_forward needs the Encoder instance matching cfg")
    model.registry = registry
    return model.forward(ids)


# ---------------------------------------------------------------- MLP


class MLP:
    """Affine-tanh stack over bag-of-words features."""

    kind = "mlp"

    def __init__(self, widths: list[int], seed: int = 0, identity: bool = False):
        if len(widths) < 2:
            raise ContractError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        rng = np.random.default_rng(seed)
        layers = []
        for i, (n, m) in enumerate(zip(widths[:-1], widths[1:])):
            path = "head" if i == len(widths) - 2 else f"layer/{i}"
            if identity:
                if m != n:
                    raise ContractError("identity init needs equal widths")
                layers.append((path, DenseLinear(np.eye(m), np.zeros(m))))
            else:
                layers.append((path, _init_linear(rng, m, n)))
        self.registry = LayerRegistry(layers, [p for p, _ in layers if p != "head"])

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.widths[0]:
            raise DimensionError(f"MLP expects {self.widths[0]} input features, got shape {x.shape}")
        paths = self.registry.paths()
        for p in paths[:-1]:
            x = nd.tanh(self.registry[p](x))
        return self.registry[paths[-1]](x)

    __call__ = forward

    def extra_parameters(self) -> dict[str, Tensor]:
        return {}

    def topology(self) -> dict:
        return {"kind": self.kind, "config": {"widths": self.widths}}


def mlp_forward(widths: list[int], registry: LayerRegistry, x) -> Tensor:
    model = MLP.__new__(MLP)
    model.widths = list(widths)
    model.registry = registry
    return model.forward(x)


def bag_of_words(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    """Normalised token histograms, PAD excluded."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((ids.shape[0], vocab_size))
    rows = np.repeat(np.arange(ids.shape[0]), ids.shape[1])
    np.add.at(out, (rows, ids.reshape(-1)), 1.0)
    out[:, PAD] = 0.0
    total = out.sum(axis=1, keepdims=True)
    return out / np.maximum(total, 1.0)


class BowClassifier(MLP):
    """MLP applied to bag-of-words features of token ids."""

    kind = "bow_mlp"

    def __init__(self, vocab_size: int, hidden: list[int], n_classes: int, seed: int = 0):
        super().__init__([vocab_size, *hidden, n_classes], seed)
        self.vocab_size = vocab_size

    def forward(self, ids) -> Tensor:
        return super().forward(bag_of_words(ids, self.vocab_size))

    __call__ = forward

    def topology(self) -> dict:
        return {"kind": self.kind, "config": {"widths": self.widths}}


Model = Union[Encoder, MLP]


# ---------------------------------------------------------------- replacement


def select_paths(model: Model, which: Union[str, Iterable[str]] = "all") -> list[str]:
    """Resolve a layer filter: ``all``, ``attn``, ``ffn``, or explicit paths / glob patterns."""
    reg = model.registry
    candidates = reg.compressible
    if isinstance(which, str):
        if which == "all":
            return list(candidates)
        if which == "attn":
            return [p for p in candidates if p.rsplit("/", 1)[-1] in ATTN_SLOTS]
        if which == "ffn":
            return [p for p in candidates if p.rsplit("/", 1)[-1] in FFN_SLOTS]
        which = [w.strip() for w in which.split(",") if w.strip()]
    chosen = []
    for pattern in which:
        hits = [p for p in reg.paths() if fnmatch.fnmatchcase(p, pattern)]
        if not hits:
            raise KeyError(f"unknown layer path {pattern!r}; valid paths: {reg.paths()}")
        chosen.extend(h for h in hits if h not in chosen)
    return chosen


def replace_linears(model: Model, which: Union[str, Iterable[str]] = "all", s: float = 10.0, calibrate: bool = True) -> LayerRegistry:
    """SVD-decompose the selected dense layers in place (alpha = 0).

    With ``calibrate`` the stored singular values are pre-corrected so the
    decomposed model initially reproduces the dense one.
    """
    paths = select_paths(model, which)
    reg = model.registry
    for p in paths:
        layer = reg[p]
        if not isinstance(layer, DenseLinear):
            raise ContractError(f"{p} is already {layer.kind}")
        bias = None if layer.bias is None else layer.bias.data
        reg[p] = decompose(layer.W.data, s=s, bias=bias, calibrate=calibrate)
    reg.compressible = list(paths)
    return reg


def parameters(model: Model) -> dict[str, Tensor]:
    """Every tensor of the model keyed by ``<path>/<name>``."""
    out = dict(model.extra_parameters())
    for path, layer in model.registry.items():
        for name, t in layer.parameters().items():
            out[f"{path}/{name}"] = t
    return out
