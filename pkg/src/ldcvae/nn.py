"""Parameter storage, layers and the optimizer built on :mod:`ldcvae.autodiff`."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamStore:
    """Ordered mapping of dotted parameter names to leaf tensors."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def zeros(self, name: str, *shape: int) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, *shape: int) -> Tensor:
        return self.add(name, np.ones(shape))

    def normal(self, name: str, *shape: int, scale: float = 0.02) -> Tensor:
        return self.add(name, self.rng.normal(0.0, scale, size=shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self._params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.ascontiguousarray(state[k], dtype=np.float64).copy()

    def n_parameters(self) -> int:
        return sum(p.size for p in self._params.values())


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.weight = store.glorot(f"{name}.weight", d_in, d_out)
        self.bias = store.zeros(f"{name}.bias", d_out) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = out + ad.broadcast(self.bias, out.shape)
        return out


class StackedLinear:
    """``n`` independent affine maps applied to an ``(n, rows, d_in)`` input."""

    def __init__(self, store: ParamStore, name: str, n: int, d_in: int, d_out: int):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = store.add(f"{name}.weight", store.rng.uniform(-bound, bound, size=(n, d_in, d_out)))
        self.bias = store.zeros(f"{name}.bias", n, 1, d_out)
        self.n, self.d_in, self.d_out = n, d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        return out + ad.broadcast(self.bias, out.shape)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.ones(f"{name}.gain", dim)
        self.offset = store.zeros(f"{name}.offset", dim)

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.layernorm_lastdim(x)
        return y * ad.broadcast(self.gain, y.shape) + ad.broadcast(self.offset, y.shape)


class TransformerLayer:
    """Pre-norm multi-head attention + feed-forward block.

    With ``n_keys`` set, only the last ``n_keys`` rows act as keys and
    values; earlier rows (readout tokens) still query and are updated.
    """

    def __init__(self, store: ParamStore, name: str, d_model: int, n_heads: int, d_ff: int | None = None):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.d_head = d_model // n_heads
        d_ff = d_ff or 2 * d_model
        self.norm1 = LayerNorm(store, f"{name}.norm1", d_model)
        self.wqkv = Linear(store, f"{name}.wqkv", d_model, 3 * d_model, bias=False)
        self.wo = Linear(store, f"{name}.wo", d_model, d_model)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d_model)
        self.ff1 = Linear(store, f"{name}.ff1", d_model, d_ff)
        self.ff2 = Linear(store, f"{name}.ff2", d_ff, d_model)

    def attention(self, x: Tensor, n_keys: int | None = None) -> tuple[Tensor, Tensor]:
        n_rows = x.shape[0]
        first_key = 0 if n_keys is None else n_rows - n_keys
        qkv = ad.reshape(self.wqkv(self.norm1(x)), (n_rows, 3, self.n_heads, self.d_head))
        qkv = ad.transpose(qkv, (1, 2, 0, 3))  # (3, heads, rows, d_head)
        q = qkv[0]
        k_t = ad.transpose(qkv[1, :, first_key:], (0, 2, 1))
        v = qkv[2, :, first_key:]
        weights = ad.softmax_lastdim(ad.matmul(q, k_t) * (1.0 / math.sqrt(self.d_head)))
        ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (1, 0, 2)), (n_rows, self.d_model))
        return self.wo(ctx), weights

    def __call__(self, x: Tensor, n_keys: int | None = None, attn_log: list | None = None) -> Tensor:
        a, weights = self.attention(x, n_keys)
        if attn_log is not None:
            attn_log.append(weights.data)
        x = x + a
        return x + self.ff2(ad.relu(self.ff1(self.norm2(x))))


class TransformerBlock:
    """Stack of :class:`TransformerLayer` with a final layer norm.

    No positional encodings: the output is equivariant to row permutations
    of the key/value rows.
    """

    def __init__(self, store: ParamStore, name: str, d_model: int, n_layers: int, n_heads: int,
                 attention: str = "exact"):
        if attention != "exact":
            raise NotImplementedError(f"attention kind {attention!r}; only 'exact' is available")
        self.layers = [TransformerLayer(store, f"{name}.layer{i}", d_model, n_heads) for i in range(n_layers)]
        self.norm = LayerNorm(store, f"{name}.norm", d_model)
        self.d_model, self.n_layers, self.n_heads = d_model, n_layers, n_heads

    def __call__(self, x: Tensor, n_keys: int | None = None, attn_log: list | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, n_keys=n_keys, attn_log=attn_log)
        return self.norm(x)


class AttnPool:
    """Gated attention pooling: softmax((tanh(hA) * sigmoid(hB)) c) weights."""

    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int | None = None):
        hidden = hidden or dim
        self.a = Linear(store, f"{name}.a", dim, hidden)
        self.b = Linear(store, f"{name}.b", dim, hidden)
        self.c = Linear(store, f"{name}.c", hidden, 1)

    def weights(self, h: Tensor) -> Tensor:
        gate = ad.tanh(self.a(h)) * ad.sigmoid(self.b(h))
        scores = self.c(gate)  # (n, 1)
        return ad.softmax_lastdim(ad.transpose(scores))  # (1, n)

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        w = self.weights(h)
        return ad.reshape(ad.matmul(w, h), (h.shape[1],)), w


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4, weight_decay: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            if self.lr == 0.0:
                continue
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
