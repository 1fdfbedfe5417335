"""Transformer building blocks on top of :mod:`rilm.tensor`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from rilm import tensor as T
from rilm.tensor import Tensor


class Module:
    """Minimal parameter container; parameter order is attribute-assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = OrderedDict(self.named_parameters())
        missing = [n for n in own if n not in state]
        extra = [n for n in state if n not in own]
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:3]} unexpected={extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} vs model shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return self._modules[str(i)]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)
        self.use_bias = bias
        if bias:
            self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.use_bias else y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Tensor(rng.normal(0.0, 1.0, size=(n, d)), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.weight = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(T.relu(self.w1(x)))


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d_model, 2, dtype=np.float64) * (-np.log(10000.0) / d_model))
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d_model // 2]
    return pe


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask, True where query i may attend key j (j <= i)."""
    return np.tril(np.ones((n, n), dtype=bool))


def length_mask(lengths, max_len: int) -> np.ndarray:
    """Boolean (B, max_len), True on valid (non-padded) positions."""
    return np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``n_heads`` heads.

    ``mask`` is boolean, True = may attend, broadcastable to (B, Tq, Tk).
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        dk = self.d_model // self.n_heads
        return T.transpose(T.reshape(x, (b, t, self.n_heads, dk)), (0, 2, 1, 3))

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask=None) -> Tensor:
        if q_in.ndim != 3 or kv_in.ndim != 3:
            raise T.ShapeError(f"attention expects (B, T, D) inputs, got {q_in.shape} / {kv_in.shape}")
        b, tq, _ = q_in.shape
        tk = kv_in.shape[1]
        q = self._split(self.wq(q_in))
        k = self._split(self.wk(kv_in))
        v = self._split(self.wv(kv_in))
        dk = self.d_model // self.n_heads
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dk))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape[-1] != tk or (mask.ndim >= 2 and mask.shape[-2] not in (1, tq)):
                raise T.ShapeError(f"attention mask {mask.shape} does not match (Tq={tq}, Tk={tk})")
            if mask.ndim == 3:
                mask = mask[:, None, :, :]
            scores = T.masked_fill(scores, ~mask, T.MASK_VALUE)
        attn = T.softmax(scores)
        ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, self.d_model))
        return self.wo(ctx)


class SelfAttentionLayer(Module):
    """Pre-norm block: self-attention + feed-forward (encoder or LM layer)."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, mask) -> Tensor:
        h = self.norm1(x)
        x = T.add(x, self.self_attn(h, h, mask))
        return T.add(x, self.ff(self.norm2(x)))


class CrossAttentionLayer(Module):
    """Pre-norm block: causal self-attention + cross-attention + feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.src_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm3 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, self_mask, memory: Tensor, memory_mask) -> Tensor:
        h = self.norm1(x)
        x = T.add(x, self.self_attn(h, h, self_mask))
        x = T.add(x, self.src_attn(self.norm2(x), memory, memory_mask))
        return T.add(x, self.ff(self.norm3(x)))


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1, label_smoothing: float = 0.0) -> Tensor:
    """Sum of token-level negative log-likelihoods over non-ignored targets."""
    targets = np.asarray(targets, dtype=np.int64)
    valid = targets != ignore_index
    logp = T.log_softmax(logits)
    nll = T.scale(T.gather_last(logp, np.where(valid, targets, 0)), -1.0)
    if label_smoothing > 0.0:
        smooth = T.scale(T.mean(logp, axis=-1), -1.0)
        nll = T.add(T.scale(nll, 1.0 - label_smoothing), T.scale(smooth, label_smoothing))
    return T.tsum(T.mul(nll, valid.astype(T.DTYPE)))
