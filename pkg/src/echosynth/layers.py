"""Transformer building blocks on the autodiff engine.

Modules register parameters (Tensors with ``requires_grad``) and child
modules automatically through attribute assignment, and expose them as a flat
``{dotted.name: Tensor}`` dictionary in registration order.  That dictionary
is the interface to the optimizer and to checkpoints, so registration order
and names must stay stable across construction with the same config.

Attention masking convention: masks enter as an additive ndarray broadcast to
the score shape, with 0.0 at allowed pairs and -1e30 at disallowed ones.
-1e30 absorbs any finite score in float32 and underflows to exactly 0 after
softmax, so masked keys contribute exactly nothing to the output. Causality
and padding guarantees in the tests are bitwise because of this.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor

NEG_MASK = -1e30


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.param_dict()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {missing[:5]}"
                           + ("..." if len(missing) > 5 else ""))
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter '{name}': checkpoint shape "
                                 f"{arr.shape} != model shape {p.data.shape}")
            p.data = arr.copy()


class ModuleList:
    def __init__(self, modules=()):
        object.__setattr__(self, "_children", {})
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module):
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def named_parameters(self, prefix: str = ""):
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")


def param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32),
                  requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Linear(Module):
    """y = x @ weight + bias, weight stored as (d_in, d_out).

    Optional low-rank adaptation: with ``lora_a`` (r, d_in) and ``lora_b``
    (d_out, r) attached, the forward adds (alpha/r) * ((x @ A^T) @ B^T),
    which equals routing x through the weight delta B @ A.  ``lora_b`` is
    zero at attach time so the adapted model starts bit-identical to the
    base model.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: float | None = None):
        super().__init__()
        if std is None:
            std = 1.0 / math.sqrt(d_in)
        self.weight = param(rng, (d_in, d_out), std=std)
        self.bias = zeros_param((d_out,)) if bias else None
        self.lora_a = None
        self.lora_b = None
        self.lora_scale = 0.0

    def attach_lora(self, rank: int, alpha: float, rng: np.random.Generator):
        d_in, d_out = self.weight.data.shape
        if not (1 <= rank <= min(d_in, d_out)):
            raise ValueError(f"LoRA rank {rank} out of range for a "
                             f"({d_in}, {d_out}) weight")
        self.lora_a = param(rng, (rank, d_in), std=1.0 / math.sqrt(d_in))
        self.lora_b = zeros_param((d_out, rank))
        self.lora_scale = alpha / rank

    def merge_lora(self) -> None:
        """Fold the adapter into the base weight; adapter is removed."""
        if self.lora_a is None:
            raise ValueError("no adapter attached")
        delta = self.lora_b.data @ self.lora_a.data  # (d_out, d_in)
        self.weight.data = self.weight.data + self.lora_scale * delta.T
        self._params.pop("lora_a", None)
        self._params.pop("lora_b", None)
        self.lora_a = None
        self.lora_b = None
        self.lora_scale = 0.0

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        if self.lora_a is not None:
            at = self.lora_a.permute(1, 0)      # (d_in, r)
            bt = self.lora_b.permute(1, 0)      # (r, d_out)
            y = y + ((x @ at) @ bt) * self.lora_scale
        return y

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = ones_param((dim,))
        self.beta = zeros_param((dim,))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return x.layer_norm(self.eps) * self.gamma + self.beta

    __call__ = forward


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator,
                 std: float = 0.02):
        super().__init__()
        self.table = param(rng, (num, dim), std=std)

    def forward(self, idx: np.ndarray) -> Tensor:
        from .autodiff import embedding
        return embedding(self.table, idx)

    __call__ = forward


def causal_mask(n: int) -> np.ndarray:
    """Additive (n, n) mask: row i may attend to columns 0..i."""
    m = np.zeros((n, n), dtype=np.float32)
    m[np.triu_indices(n, k=1)] = NEG_MASK
    return m


def key_padding_mask(valid: np.ndarray, heads: int, n_query: int) -> np.ndarray:
    """Additive (B, heads, n_query, n_key) mask from a (B, n_key) validity map."""
    valid = np.asarray(valid, dtype=bool)
    add = np.where(valid, 0.0, NEG_MASK).astype(np.float32)  # (B, n_key)
    return np.broadcast_to(add[:, None, None, :],
                           (valid.shape[0], heads, n_query, valid.shape[1]))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, head_dim: int,
                 rng: np.random.Generator):
        super().__init__()
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.wq = Linear(dim, inner, rng)
        self.wk = Linear(dim, inner, rng)
        self.wv = Linear(dim, inner, rng)
        self.wo = Linear(inner, dim, rng)

    def forward(self, x: Tensor, add_mask: np.ndarray | None = None) -> Tensor:
        # x: (B, N, D) -> (B, N, D)
        b, n, _ = x.shape
        h, d = self.heads, self.head_dim

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, n, h, d).permute(0, 2, 1, 3)  # (B, h, N, d)

        q = split(self.wq(x))
        k = split(self.wk(x))
        v = split(self.wv(x))
        scores = (q @ k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
        if add_mask is not None:
            scores = scores + Tensor(np.ascontiguousarray(
                np.broadcast_to(add_mask.astype(np.float32), scores.shape)))
        attn = scores.softmax(axis=-1)
        out = attn @ v                                  # (B, h, N, d)
        out = out.permute(0, 2, 1, 3).reshape(b, n, h * d)
        return self.wo(out)

    __call__ = forward


class FeedForward(Module):
    def __init__(self, dim: int, ff_mult: int, rng: np.random.Generator):
        super().__init__()
        self.lin1 = Linear(dim, dim * ff_mult, rng)
        self.lin2 = Linear(dim * ff_mult, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(self.lin1(x).gelu())

    __call__ = forward


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, dim: int, heads: int, head_dim: int, ff_mult: int,
                 rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, head_dim, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult, rng)

    def forward(self, x: Tensor, add_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), add_mask)
        x = x + self.ff(self.ln2(x))
        return x

    __call__ = forward
