"""Layers, parameter store and optimizer shared by the transformer and the encoders."""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .grad import Tensor, concat


class ParamStore:
    """Ordered name -> Tensor registry.

    All forward-time parameter reads go through ``__getitem__`` so that tests
    can record which parameters a code path touched (used to verify that the
    sampling path never reads projector weights).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._access_log: set[str] | None = None

    def add(self, name: str, data: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise InvalidArgumentError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data), requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        if self._access_log is not None:
            self._access_log.add(name)
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def raw(self, name: str) -> Tensor:
        """Fetch without touching the access log (optimizer / serialization path)."""
        return self._params[name]

    def items(self):
        return self._params.items()

    def n_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def start_access_log(self):
        self._access_log = set()

    def stop_access_log(self) -> set[str]:
        log, self._access_log = self._access_log, None
        return log if log is not None else set()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for k, t in self._params.items():
            if k not in arrays:
                raise InvalidArgumentError(f"missing parameter in checkpoint: {k}")
            if arrays[k].shape != t.data.shape:
                raise InvalidArgumentError(
                    f"shape mismatch for {k}: {arrays[k].shape} vs {t.data.shape}")
            t.data = arrays[k].astype(t.data.dtype, copy=True)


def init_linear(store: ParamStore, name: str, d_in: int, d_out: int,
                rng: np.random.Generator, dtype, scale: float | None = None,
                zero: bool = False):
    if zero:
        w = np.zeros((d_in, d_out), dtype=dtype)
    else:
        std = scale if scale is not None else d_in ** -0.5
        w = rng.normal(0.0, std, size=(d_in, d_out)).astype(dtype)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(d_out, dtype=dtype))


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return x @ store[f"{name}.w"] + store[f"{name}.b"]


def init_layernorm(store: ParamStore, name: str, d: int, dtype):
    store.add(f"{name}.g", np.ones(d, dtype=dtype))
    store.add(f"{name}.b", np.zeros(d, dtype=dtype))


def layer_norm(store: ParamStore, name: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return xc * inv * store[f"{name}.g"] + store[f"{name}.b"]


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose((0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, s, dk = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(b, s, h * dk)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention. ``mask`` is additive (0 keep, -inf drop)."""
    dk = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dk))
    if mask is not None:
        scores = scores + Tensor(mask.astype(scores.dtype))
    probs = scores.softmax(axis=-1)
    return probs @ v


class TransformerBlock:
    """Pre-LN self-attention block. Returns the post-attention residual stream
    (the tap point) alongside the block output."""

    def __init__(self, store: ParamStore, name: str, d_model: int, heads: int,
                 mlp_ratio: int, rng: np.random.Generator, dtype):
        if d_model % heads != 0:
            raise InvalidArgumentError("d_model must be divisible by heads")
        self.store = store
        self.name = name
        self.heads = heads
        init_layernorm(store, f"{name}.ln1", d_model, dtype)
        init_linear(store, f"{name}.attn.wq", d_model, d_model, rng, dtype)
        init_linear(store, f"{name}.attn.wk", d_model, d_model, rng, dtype)
        init_linear(store, f"{name}.attn.wv", d_model, d_model, rng, dtype)
        init_linear(store, f"{name}.attn.wo", d_model, d_model, rng, dtype)
        init_layernorm(store, f"{name}.ln2", d_model, dtype)
        d_hidden = mlp_ratio * d_model
        init_linear(store, f"{name}.mlp.fc1", d_model, d_hidden, rng, dtype)
        init_linear(store, f"{name}.mlp.fc2", d_hidden, d_model, rng, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None):
        s, n = self.store, self.name
        h = layer_norm(s, f"{n}.ln1", x)
        q = split_heads(linear(s, f"{n}.attn.wq", h), self.heads)
        k = split_heads(linear(s, f"{n}.attn.wk", h), self.heads)
        v = split_heads(linear(s, f"{n}.attn.wv", h), self.heads)
        att = merge_heads(attention(q, k, v, mask))
        x = x + linear(s, f"{n}.attn.wo", att)
        tap = x
        h2 = layer_norm(s, f"{n}.ln2", x)
        x = x + linear(s, f"{n}.mlp.fc2", linear(s, f"{n}.mlp.fc1", h2).silu())
        return x, tap


def sinusoidal_features(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Sinusoidal features of a scalar in [0, 1], shape (..., dim)."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[..., None] * freqs * 1000.0
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if feats.shape[-1] < dim:
        feats = np.concatenate([feats, np.zeros(feats.shape[:-1] + (dim - feats.shape[-1],))], axis=-1)
    return feats.astype(dtype)


class AdamW:
    """Adaptive moments with decoupled weight decay, as in the usual recipe."""

    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, weight_decay: float = 0.0, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in store.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.store.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.store.items():
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        out["opt.t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for k in self.m:
            self.m[k] = arrays[f"opt.m.{k}"].astype(self.m[k].dtype, copy=True)
            self.v[k] = arrays[f"opt.v.{k}"].astype(self.v[k].dtype, copy=True)
        self.t = int(arrays["opt.t"][0])


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    return concat([r.reshape((1,) + r.shape) for r in rows], axis=0)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross entropy; labels are integer class indices."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    mx = logits.data.max(axis=-1, keepdims=True)  # detached shift for stability
    z = logits - Tensor(mx)
    lse = z.exp().sum(axis=-1).log()
    picked = z[np.arange(n), labels]
    return (lse - picked).mean()
