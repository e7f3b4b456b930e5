"""Hand-written network layers with closed-form backward passes.

No autodiff: every layer exposes ``forward(x) -> (y, cache)`` and
``backward(cache, dy) -> dx``, accumulating parameter gradients into a
shared :class:`ParamStore`. Activations are float32; token sequences are
plain ``(S, D)`` arrays (batching is done by looping windows).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor_core import DTYPE, Rng, softmax


class ParamStore:
    """Named parameter registry with matching gradient buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ShapeError(f"duplicate parameter {name!r}")
        arr = np.ascontiguousarray(value, dtype=DTYPE)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def grad(self, name: str) -> np.ndarray:
        return self.grads[name]

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self.params if n.startswith(prefix))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            if n not in self.params:
                raise ShapeError(f"unknown parameter {n!r} in state dict")
            if self.params[n].shape != v.shape:
                raise ShapeError(f"shape mismatch for {n!r}")
            self.params[n][...] = v

    def copy_subtree(self, src_prefix: str, dst_prefix: str) -> None:
        """Copy every parameter under one prefix onto the matching other."""
        for name in self.names(src_prefix):
            dst = dst_prefix + name[len(src_prefix):]
            if dst not in self.params:
                raise ShapeError(f"no destination parameter {dst!r}")
            self.params[dst][...] = self.params[name]


def xavier(shape: tuple[int, int], rng: Rng) -> np.ndarray:
    fan_out, fan_in = shape
    std = float(np.sqrt(2.0 / (fan_in + fan_out)))
    return rng.normal(shape, scale=std)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: Rng, zero_init: bool = False):
        self.store = store
        self.w_name = name + ".w"
        self.b_name = name + ".b"
        w = np.zeros((d_out, d_in), DTYPE) if zero_init else xavier((d_out, d_in), rng)
        store.add(self.w_name, w)
        store.add(self.b_name, np.zeros(d_out, DTYPE))

    @property
    def w(self) -> np.ndarray:
        return self.store.params[self.w_name]

    @property
    def b(self) -> np.ndarray:
        return self.store.params[self.b_name]

    def forward(self, x: np.ndarray):
        return x @ self.w.T + self.b, x

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        x = cache
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.store.grads[self.w_name] += dy2.T @ x2
        self.store.grads[self.b_name] += dy2.sum(axis=0)
        return dy @ self.w


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int, eps: float = 1e-5):
        self.store = store
        self.g_name = name + ".g"
        self.b_name = name + ".b"
        store.add(self.g_name, np.ones(d, DTYPE))
        store.add(self.b_name, np.zeros(d, DTYPE))
        self.eps = eps

    def forward(self, x: np.ndarray):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        y = xhat * self.store.params[self.g_name] + self.store.params[self.b_name]
        return y.astype(DTYPE, copy=False), (xhat, inv)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        xhat, inv = cache
        lead = tuple(range(dy.ndim - 1))
        self.store.grads[self.g_name] += (dy * xhat).sum(axis=lead)
        self.store.grads[self.b_name] += dy.sum(axis=lead)
        dxhat = dy * self.store.params[self.g_name]
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (inv * (dxhat - m1 - xhat * m2)).astype(DTYPE, copy=False)


class FeedForward:
    """Two-layer tanh MLP, optionally with distinct in/out widths."""

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden: int,
                 rng: Rng, d_out: int | None = None, zero_out: bool = False):
        d_out = d_in if d_out is None else d_out
        self.lin1 = Linear(store, name + ".lin1", d_in, hidden, rng.child("l1"))
        self.lin2 = Linear(store, name + ".lin2", hidden, d_out, rng.child("l2"),
                           zero_init=zero_out)

    def forward(self, x: np.ndarray):
        pre, c1 = self.lin1.forward(x)
        h = np.tanh(pre)
        y, c2 = self.lin2.forward(h)
        return y, (c1, h, c2)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        c1, h, c2 = cache
        dh = self.lin2.backward(c2, dy)
        dpre = dh * (1.0 - h * h)
        return self.lin1.backward(c1, dpre)


class SelfAttention:
    """Single-head full attention over one token sequence."""

    def __init__(self, store: ParamStore, name: str, d: int, rng: Rng,
                 zero_out: bool = False):
        self.d = d
        self.wq = Linear(store, name + ".wq", d, d, rng.child("q"))
        self.wk = Linear(store, name + ".wk", d, d, rng.child("k"))
        self.wv = Linear(store, name + ".wv", d, d, rng.child("v"))
        self.wo = Linear(store, name + ".wo", d, d, rng.child("o"),
                         zero_init=zero_out)
        self.scale = 1.0 / float(np.sqrt(d))

    def forward(self, x: np.ndarray, trace: dict | None = None):
        q, cq = self.wq.forward(x)
        k, ck = self.wk.forward(x)
        v, cv = self.wv.forward(x)
        att = softmax((q @ k.T) * self.scale, axis=-1)
        if trace is not None:
            trace.setdefault("attn", []).append(att)
        ctx = att @ v
        y, co = self.wo.forward(ctx)
        return y, (cq, ck, cv, co, q, k, v, att, ctx)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        cq, ck, cv, co, q, k, v, att, ctx = cache
        dctx = self.wo.backward(co, dy)
        datt = dctx @ v.T
        dv = att.T @ dctx
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = (dscores @ k) * self.scale
        dk = (dscores.T @ q) * self.scale
        dx = self.wq.backward(cq, dq)
        dx = dx + self.wk.backward(ck, dk)
        dx = dx + self.wv.backward(cv, dv)
        return dx


class CrossAttention:
    """Single-head attention from a query sequence onto memory rows."""

    def __init__(self, store: ParamStore, name: str, d: int, rng: Rng,
                 zero_values: bool = False):
        self.d = d
        self.wq = Linear(store, name + ".wq", d, d, rng.child("q"))
        self.wk = Linear(store, name + ".wk", d, d, rng.child("k"))
        self.wv = Linear(store, name + ".wv", d, d, rng.child("v"),
                         zero_init=zero_values)
        self.scale = 1.0 / float(np.sqrt(d))

    def forward(self, h: np.ndarray, rows_k: np.ndarray, rows_v: np.ndarray,
                trace: dict | None = None):
        q, cq = self.wq.forward(h)
        k, ck = self.wk.forward(rows_k)
        v, cv = self.wv.forward(rows_v)
        att = softmax((q @ k.T) * self.scale, axis=-1)
        if trace is not None:
            trace.setdefault("attn", []).append(att)
        out = att @ v
        return out, (cq, ck, cv, q, k, v, att)

    def backward(self, cache, dout: np.ndarray):
        cq, ck, cv, q, k, v, att = cache
        datt = dout @ v.T
        dv = att.T @ dout
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = (dscores @ k) * self.scale
        dk = (dscores.T @ q) * self.scale
        dh = self.wq.backward(cq, dq)
        drows_k = self.wk.backward(ck, dk)
        drows_v = self.wv.backward(cv, dv)
        return dh, drows_k, drows_v


class Embedding:
    def __init__(self, store: ParamStore, name: str, vocab: int, d: int, rng: Rng):
        self.store = store
        self.name = name + ".w"
        store.add(self.name, rng.normal((vocab, d), scale=0.1))

    def forward(self, ids: np.ndarray):
        return self.store.params[self.name][ids], ids

    def backward(self, cache, dy: np.ndarray) -> None:
        np.add.at(self.store.grads[self.name], cache, dy)


class DitBlock:
    """Pre-norm transformer block: attention + tanh FFN, both residual.

    Control features can be added to the visual-token slice right after the
    attention residual. The add is skipped entirely when it would be a
    numerical no-op (zero gate or all-zero features) to keep the gated-off
    path bit-identical to the plain one.
    """

    def __init__(self, store: ParamStore, name: str, d: int, rng: Rng,
                 hidden_mult: int = 4, identity_init: bool = False):
        self.ln1 = LayerNorm(store, name + ".ln1", d)
        self.attn = SelfAttention(store, name + ".attn", d, rng.child("attn"),
                                  zero_out=identity_init)
        self.ln2 = LayerNorm(store, name + ".ln2", d)
        self.ffn = FeedForward(store, name + ".ffn", d, hidden_mult * d,
                               rng.child("ffn"), zero_out=identity_init)

    def forward(self, x: np.ndarray, inject: np.ndarray | None = None,
                gamma: float = 1.0, vis_start: int = 0,
                trace: dict | None = None):
        a_in, c_ln1 = self.ln1.forward(x)
        a_out, c_attn = self.attn.forward(a_in, trace)
        x1 = x + a_out
        requested = inject is not None and gamma != 0.0
        if requested and inject.any():
            if inject.shape != x1[vis_start:].shape:
                raise ShapeError(
                    f"injection shape {inject.shape} does not match visual "
                    f"slice {x1[vis_start:].shape}"
                )
            x1[vis_start:] += gamma * inject
        f_in, c_ln2 = self.ln2.forward(x1)
        f_out, c_ffn = self.ffn.forward(f_in)
        y = x1 + f_out
        cache = (c_ln1, c_attn, c_ln2, c_ffn, requested, gamma, vis_start)
        return y, cache

    def backward(self, cache, dy: np.ndarray):
        c_ln1, c_attn, c_ln2, c_ffn, requested, gamma, vis_start = cache
        df_in = self.ffn.backward(c_ffn, dy)
        dx1 = dy + self.ln2.backward(c_ln2, df_in)
        dinject = gamma * dx1[vis_start:] if requested else None
        da_in = self.attn.backward(c_attn, dx1)
        dx = dx1 + self.ln1.backward(c_ln1, da_in)
        return dx, dinject


class Sgd:
    """Plain SGD over a subset of parameters, with global-norm clipping."""

    def __init__(self, store: ParamStore, lr: float,
                 prefixes: tuple[str, ...] = ("",), clip_norm: float | None = 5.0):
        self.store = store
        self.lr = lr
        self.prefixes = prefixes
        self.clip_norm = clip_norm

    def trainable(self) -> list[str]:
        return sorted(
            n for n in self.store.params
            if any(n.startswith(p) for p in self.prefixes)
        )

    def _clip_scale(self, names: list[str]) -> float:
        if self.clip_norm is None:
            return 1.0
        total = float(
            sum(float(np.sum(self.store.grads[n].astype(np.float64) ** 2))
                for n in names)
        )
        norm = float(np.sqrt(total))
        return self.clip_norm / (norm + 1e-12) if norm > self.clip_norm else 1.0

    def step(self) -> None:
        names = self.trainable()
        scale = self._clip_scale(names)
        for n in names:
            self.store.params[n] -= (self.lr * scale) * self.store.grads[n]
        for n in names:
            self.store.grads[n][...] = 0.0


class AdamOpt(Sgd):
    """Diagonal-moment SGD (Adam) over hand-computed gradients.

    The stage trainers use this instead of plain SGD: on this stack plain
    SGD stalls well before the control features bind to the conditioning,
    while the diagonally preconditioned update reaches usable models inside
    the desk-scale budget. Gradients stay closed-form.
    """

    def __init__(self, store: ParamStore, lr: float,
                 prefixes: tuple[str, ...] = ("",),
                 clip_norm: float | None = 5.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(store, lr, prefixes, clip_norm)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step = 0

    def step(self) -> None:
        names = self.trainable()
        scale = self._clip_scale(names)
        self._step += 1
        b1c = 1.0 - self.beta1 ** self._step
        b2c = 1.0 - self.beta2 ** self._step
        for n in names:
            g = scale * self.store.grads[n]
            m = self._m.setdefault(n, np.zeros_like(g))
            v = self._v.setdefault(n, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            self.store.params[n] -= self.lr * update
            self.store.grads[n][...] = 0.0


def sinusoid(positions: np.ndarray, d: int, base: float = 10000.0) -> np.ndarray:
    """Classic sin/cos position encoding table, one row per position."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(base, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(DTYPE)
