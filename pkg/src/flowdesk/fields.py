"""Conditional vector-field networks.

``MlpField`` is the small network used for 2-D experiments. ``DiT`` is a
toy-size diffusion transformer with AdaLN-modulated self-attention (RoPE),
cross-attention and tanh-GELU feed-forward branches, and a zero-initialized
output projection so a fresh model predicts exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Param, Tensor


class Module:
    """Parameter container; params are discovered from attributes in definition order."""

    training = False

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Param):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_params(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{name}.{i}", item

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def state(self) -> dict[str, Param]:
        return dict(self.named_params())

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def train(self, mode: bool = True):
        for m in self._modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value._modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item._modules()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, zero: bool = False, bias=None):
        if zero or rng is None:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal((d_in, d_out)) / np.sqrt(d_in)
        self.weight = Param(w)
        self.bias = Param(np.zeros(d_out) if bias is None else np.asarray(bias, dtype=np.float64))

    def __call__(self, x):
        x = T.as_tensor(x)
        if x.ndim == 1:
            return (x.reshape(1, -1) @ self.weight).reshape(-1) + self.bias
        return x @ self.weight + self.bias


# ---------------------------------------------------------------------------
# embeddings and conditioning


def sinusoidal_embed(t, dim: int) -> np.ndarray:
    """Interleaved ``[sin(f0 t), cos(f0 t), sin(f1 t), ...]`` with f geometric in [1, 1e4].

    Accepts a scalar (returns shape ``(dim,)``) or a vector of times
    (returns ``(len(t), dim)``).
    """
    if dim <= 0 or dim % 2:
        raise ContractError(f"embedding dim must be a positive even number, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10.0 ** (4.0 * np.arange(half) / (half - 1))
    t = np.asarray(t, dtype=np.float64)
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def cfg_dropout_condition(cond, null, rng, p_uncond: float):
    """Replace each condition row by the null embedding with probability ``p_uncond``.

    ``cond`` is ``(d,)`` or ``(batch, d)``. Returns ``(conditioned, dropped)``
    where ``dropped`` is the boolean mask of replaced rows.
    """
    if not 0.0 <= p_uncond <= 1.0:
        raise ContractError("p_uncond must lie in [0, 1]")
    cond = T.as_tensor(cond)
    rows = 1 if cond.ndim == 1 else cond.shape[0]
    if p_uncond == 0.0:
        return cond, np.zeros(rows, dtype=bool)
    dropped = rng.bernoulli(p_uncond, rows)
    if p_uncond == 1.0:
        dropped[:] = True
    mask = dropped.astype(np.float64)
    if cond.ndim == 2:
        mask = mask[:, None]
    else:
        mask = mask[0]
    return mask * T.as_tensor(null) + (1.0 - mask) * cond, dropped


def dropout(x, p: float, rng, training: bool):
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (~rng.bernoulli(p, x.shape)).astype(np.float64) / (1.0 - p)
    return x * keep


# ---------------------------------------------------------------------------
# MLP field


class MlpField(Module):
    """``x -> velocity`` MLP fed with ``concat(x, time embedding, condition embedding)``."""

    def __init__(self, x_dim: int = 2, n_classes: int = 0, hidden=(128, 128, 128),
                 t_dim: int = 16, cond_dim: int = 8, rng=None):
        self.x_dim = x_dim
        self.n_classes = n_classes
        self.t_dim = t_dim
        self.cond_dim = cond_dim
        self.class_table = Param(0.5 * rng.normal((max(n_classes, 1), cond_dim)))
        self.null = Param(0.5 * rng.normal(cond_dim))
        widths = [x_dim + t_dim + cond_dim, *hidden]
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.out = Linear(widths[-1], x_dim, zero=True)

    def embed_condition(self, labels, batch: int) -> Tensor:
        """Rows of the class table; ``None`` or label ``-1`` selects the null embedding."""
        if labels is None:
            return T.broadcast_to(self.null, (batch, self.cond_dim))
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.size == 1 and batch > 1:
            labels = np.full(batch, labels[0])
        if labels.size != batch:
            raise ShapeError("embed_condition", (labels.size,), (batch,))
        if np.any(labels >= self.n_classes):
            raise ContractError(f"label out of range for {self.n_classes} classes")
        is_null = (labels < 0).astype(np.float64)[:, None]
        rows = self.class_table[np.clip(labels, 0, None)]
        return is_null * self.null + (1.0 - is_null) * rows

    def __call__(self, x, t, cond=None) -> Tensor:
        x = T.as_tensor(x)
        batch = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        c = cond if isinstance(cond, Tensor) else self.embed_condition(cond, batch)
        h = T.concat([x, Tensor(sinusoidal_embed(t, self.t_dim)), c], axis=1)
        for layer in self.layers:
            h = T.gelu_tanh(layer(h))
        return self.out(h)


# ---------------------------------------------------------------------------
# DiT pieces


class AdaLN(Module):
    """Linear map ``cond -> (scale, shift[, gate])``, initialized to the identity modulation."""

    def __init__(self, cond_dim: int, width: int, gated: bool = True):
        self.width = width
        self.gated = gated
        parts = [np.ones(width), np.zeros(width)] + ([np.ones(width)] if gated else [])
        self.proj = Linear(cond_dim, len(parts) * width, zero=True, bias=np.concatenate(parts))

    def __call__(self, c):
        c = T.as_tensor(c)
        mod = self.proj(c)
        if mod.ndim == 2:  # batched cond -> broadcast over sequence
            mod = mod.reshape(mod.shape[0], 1, mod.shape[1])
        w = self.width
        scale = mod[..., 0:w]
        shift = mod[..., w:2 * w]
        gate = mod[..., 2 * w:3 * w] if self.gated else None
        return scale, shift, gate


def adaln_modulate(h, cond, params: AdaLN, branch_fn: Callable):
    """``h + gate * branch_fn(layer_norm(h) * scale + shift)`` with an unbounded gate."""
    h = T.as_tensor(h)
    scale, shift, gate = params(cond)
    if scale.shape[-1] != h.shape[-1]:
        raise ShapeError("adaln_modulate", h.shape, scale.shape)
    y = branch_fn(T.layer_norm(h) * scale + shift)
    return h + (gate * y if gate is not None else y)


def _rope_tables(positions, dim: int, base: float):
    if dim % 2:
        raise ContractError(f"RoPE needs an even head dimension, got {dim}")
    if not base > 0:
        raise ContractError("rope base must be positive")
    positions = np.asarray(positions, dtype=np.float64)
    inv = base ** (-2.0 * np.arange(dim // 2) / dim)
    angles = positions[:, None] * inv
    cos = np.repeat(np.cos(angles), 2, axis=1)
    sin = np.repeat(np.sin(angles), 2, axis=1)
    rot = np.zeros((dim, dim))
    rot[np.arange(1, dim, 2), np.arange(0, dim, 2)] = -1.0
    rot[np.arange(0, dim, 2), np.arange(1, dim, 2)] = 1.0
    return cos, sin, rot


def rope_rotate(x, positions, base: float = 16384.0):
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` by angle ``p * base**(-2i/d)``."""
    x = T.as_tensor(x)
    cos, sin, rot = _rope_tables(positions, x.shape[-1], base)
    return x * cos + (x @ rot) * sin


def rope_apply(q, k, positions, base: float = 16384.0):
    return rope_rotate(q, positions, base), rope_rotate(k, positions, base)


def _split_heads(x, heads):
    *lead, length, width = x.shape
    if width % heads:
        raise ShapeError("split_heads", x.shape, (heads,), detail="width not divisible by heads")
    x = x.reshape(*lead, length, heads, width // heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes)


def _merge_heads(x):
    *lead, heads, length, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(axes).reshape(*lead, length, heads * dh)


def attention(q, k, v, heads: int, rope_base: float | None = None):
    """Multi-head ``softmax(q k^T / sqrt(d_head)) v``; RoPE on q, k when ``rope_base`` is given."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    if rope_base is not None:
        qh = rope_rotate(qh, np.arange(q.shape[-2]), rope_base)
        kh = rope_rotate(kh, np.arange(k.shape[-2]), rope_base)
    dh = qh.shape[-1]
    scores = (qh @ T.transpose(kh, _last_two(kh.ndim))) / np.sqrt(dh)
    return _merge_heads(T.softmax(scores, axis=-1) @ vh)


def _last_two(ndim):
    return list(range(ndim - 2)) + [ndim - 1, ndim - 2]


class MultiHeadAttention(Module):
    def __init__(self, width: int, heads: int, rng, kv_dim: int | None = None,
                 rope_base: float | None = None):
        kv_dim = width if kv_dim is None else kv_dim
        self.heads = heads
        self.rope_base = rope_base
        self.q = Linear(width, width, rng)
        self.k = Linear(kv_dim, width, rng)
        self.v = Linear(kv_dim, width, rng)
        self.o = Linear(width, width, rng)

    def __call__(self, x, context=None):
        context = x if context is None else context
        out = attention(self.q(x), self.k(context), self.v(context), self.heads, self.rope_base)
        return self.o(out)


@dataclass
class DiTConfig:
    in_dim: int = 1
    depth: int = 2
    width: int = 16
    heads: int = 2
    rope_base: float = 16384.0
    p_dropout: float = 0.1
    cond_dim: int = 8
    ff_mult: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractError("width must be divisible by heads")
        if (self.width // self.heads) % 2:
            raise ContractError("head dimension must be even for RoPE")
        if not self.rope_base > 0:
            raise ContractError("rope_base must be positive")
        if not 0.0 <= self.p_dropout < 1.0:
            raise ContractError("p_dropout must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


class DiTBlock(Module):
    def __init__(self, cfg: DiTConfig, rng):
        w = cfg.width
        self.cfg = cfg
        self.ada_self = AdaLN(w, w)
        self.self_attn = MultiHeadAttention(w, cfg.heads, rng, rope_base=cfg.rope_base)
        self.ada_cross = AdaLN(w, w)
        self.cross_attn = MultiHeadAttention(w, cfg.heads, rng)
        self.ada_ff = AdaLN(w, w)
        self.ff_in = Linear(w, cfg.ff_mult * w, rng)
        self.ff_out = Linear(cfg.ff_mult * w, w, rng)

    def output_projections(self) -> list[Linear]:
        return [self.self_attn.o, self.cross_attn.o, self.ff_out]

    def __call__(self, h, c, text, rng=None):
        p = self.cfg.p_dropout
        train = self.training
        h = adaln_modulate(h, c, self.ada_self,
                           lambda x: dropout(self.self_attn(x), p, rng, train))
        h = adaln_modulate(h, c, self.ada_cross,
                           lambda x: dropout(self.cross_attn(x, text), p, rng, train))
        h = adaln_modulate(h, c, self.ada_ff,
                           lambda x: dropout(self.ff_out(dropout(T.gelu_tanh(self.ff_in(x)), p, rng, train)),
                                             p, rng, train))
        return h


def dit_block_forward(h, t_embed, text_seq, block: DiTBlock, rng=None):
    return block(h, t_embed, text_seq, rng)


class DiT(Module):
    """Toy diffusion transformer over ``(seq, in_dim)`` latents, optionally batched."""

    def __init__(self, cfg: DiTConfig, rng):
        w = cfg.width
        self.cfg = cfg
        self.in_proj = Linear(cfg.in_dim, w, rng)
        self.t_fc1 = Linear(w, w, rng)
        self.t_fc2 = Linear(w, w, rng)
        self.text_proj = Linear(cfg.cond_dim, w, rng)
        self.null_text = Param(0.5 * rng.normal((1, cfg.cond_dim)))
        self.blocks = [DiTBlock(cfg, rng) for _ in range(cfg.depth)]
        self.final_ada = AdaLN(w, w, gated=False)
        self.out_proj = Linear(w, cfg.in_dim, zero=True)

    def time_condition(self, t):
        emb = Tensor(sinusoidal_embed(t, self.cfg.width))
        return self.t_fc2(T.gelu_tanh(self.t_fc1(emb)))

    def __call__(self, latent_seq, t, text_seq=None, rng=None):
        x = T.as_tensor(latent_seq)
        if x.shape[-1] != self.cfg.in_dim:
            raise ShapeError("dit_forward", x.shape, (self.cfg.in_dim,))
        text = self.null_text if text_seq is None else T.as_tensor(text_seq)
        c = self.time_condition(t)
        ctx = self.text_proj(text)
        h = self.in_proj(x)
        for block in self.blocks:
            h = block(h, c, ctx, rng)
        scale, shift, _ = self.final_ada(c)
        return self.out_proj(T.layer_norm(h) * scale + shift)


def dit_forward(latent_seq, t, text_seq, model: DiT, rng=None):
    return model(latent_seq, t, text_seq, rng)
