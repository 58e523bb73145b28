"""Small numpy MLP kit with exact gradients.

Every network keeps its trainable parameters in one flat float64 vector; weight
matrices and biases are views into it. Optimizers, checkpoints and finite-difference
checks therefore work on a single array.

Checkpoint binary layout (little endian)::

    magic    4 bytes  b"QRLN"
    version  u32      (currently 1)
    kind     u32      0 = regressor, 1 = gaussian policy, 2 = categorical policy
    nlayers  u32      number of affine layers L
    sizes    u32 * (L + 1)
    in_scale f64 * sizes[0]
    offset   f64 * sizes[L]  constant added to the output
    params   f64 * P  per layer: W (out x in, row-major) then b (out); gaussian
                      policies append the log-std vector (sizes[L] entries)
    has_adam u32      0 or 1
    adam     u64 step, f64 lr, beta1, beta2, eps, then m (P), v (P)

A JSON sidecar (``<file>.json``) carries free-form metadata.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"QRLN"
VERSION = 1
KIND_REGRESSOR, KIND_GAUSSIAN, KIND_CATEGORICAL = 0, 1, 2
HIDDEN = (128, 128)
INIT_LOG_STD = math.log(0.4)
LOG_2PI = math.log(2.0 * math.pi)


def _orthogonal(rng, rows, cols, gain):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    qm, r = np.linalg.qr(a)
    qm = qm * np.sign(np.diag(r))
    if rows < cols:
        qm = qm.T
    return gain * qm[:rows, :cols]


class Mlp:
    """tanh hidden layers, linear output.

    ``in_scale`` multiplies the input and ``offset`` is added to the output; neither
    is trained. ``buffer`` lets a caller own the flat storage (the policy appends its
    log-std).
    """

    def __init__(self, sizes, rng=None, out_gain=1.0, buffer=None, in_scale=None, offset=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        n = self.n_params(self.sizes)
        self.params = np.zeros(n) if buffer is None else buffer
        if self.params.shape[0] < n:
            raise ValueError("parameter buffer too small")
        self.in_scale = np.ones(self.sizes[0]) if in_scale is None else np.asarray(in_scale, float).copy()
        if self.in_scale.shape != (self.sizes[0],):
            raise ValueError("in_scale must match the input width")
        self.offset = np.zeros(self.sizes[-1]) if offset is None else np.asarray(offset, float).copy()
        if self.offset.shape != (self.sizes[-1],):
            raise ValueError("offset must match the output width")
        self._bind()
        if rng is not None:
            last = len(self.layers) - 1
            for i, (w, _) in enumerate(self.layers):
                gain = out_gain if i == last else math.sqrt(2.0)
                w[...] = _orthogonal(rng, w.shape[0], w.shape[1], gain)

    @staticmethod
    def n_params(sizes) -> int:
        return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))

    def _bind(self) -> None:
        self.layers = []
        off = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            w = self.params[off : off + o * i].reshape(o, i)
            off += o * i
            b = self.params[off : off + o]
            off += o
            self.layers.append((w, b))

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} != network input {self.sizes[0]}")
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        h = x * self.in_scale
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.T + b
            if i < last:
                h = np.tanh(h)
        return h + self.offset

    def forward_cache(self, x):
        x = self._check_input(x)
        if x.ndim == 1:
            x = x[None]
        acts = [x * self.in_scale]
        h = acts[0]
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.T + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return h + self.offset, acts

    def backward(self, acts, grad_out, out=None) -> np.ndarray:
        """Gradient of ``sum(grad_out * y)`` with respect to the flat parameters."""
        g = np.zeros(self.n_params(self.sizes)) if out is None else out
        views = []
        off = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            views.append((g[off : off + o * i].reshape(o, i), g[off + o * i : off + o * i + o]))
            off += o * i + o
        delta = np.asarray(grad_out, dtype=float)
        if delta.ndim == 1:
            delta = delta[None]
        for i in range(len(self.layers) - 1, -1, -1):
            gw, gb = views[i]
            gw += delta.T @ acts[i]
            gb += delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.layers[i][0]) * (1.0 - acts[i] ** 2)
        return g


class Regressor:
    """Scalar (or vector) regression head: value functions and the height estimator."""

    kind = KIND_REGRESSOR

    def __init__(self, sizes, rng=None, in_scale=None, out_gain=1.0, offset=None):
        self.net = Mlp(sizes, rng, out_gain=out_gain, in_scale=in_scale, offset=offset)

    @classmethod
    def create(cls, n_in, rng, hidden=HIDDEN, in_scale=None, n_out=1, offset=None):
        return cls((n_in, *hidden, n_out), rng, in_scale=in_scale, offset=offset)

    @property
    def params(self):
        return self.net.params

    @params.setter
    def params(self, value):
        self.net.params[...] = value

    @property
    def sizes(self):
        return self.net.sizes

    def predict(self, obs) -> np.ndarray:
        out = self.net.forward(obs)
        return out[..., 0] if self.net.sizes[-1] == 1 else out

    def loss_and_grad(self, obs, targets):
        """Mean squared error and its gradient."""
        y, acts = self.net.forward_cache(obs)
        targets = np.asarray(targets, dtype=float).reshape(y.shape)
        err = y - targets
        n = y.shape[0]
        loss = float(np.sum(err * err) / n)
        grad = self.net.backward(acts, 2.0 * err / n)
        return loss, grad

    def copy(self):
        out = type(self)(self.sizes, in_scale=self.net.in_scale, offset=self.net.offset)
        out.params = self.params
        return out


class GaussianPolicy:
    """Diagonal Gaussian with an MLP mean and a state-independent log-std."""

    kind = KIND_GAUSSIAN

    def __init__(self, sizes, rng=None, init_log_std=INIT_LOG_STD, in_scale=None, out_gain=0.01,
                 offset=None):
        sizes = tuple(int(s) for s in sizes)
        n_mlp = Mlp.n_params(sizes)
        self.params = np.zeros(n_mlp + sizes[-1])
        self.net = Mlp(sizes, rng, out_gain=out_gain, buffer=self.params[:n_mlp], in_scale=in_scale,
                       offset=offset)
        self.log_std = self.params[n_mlp:]
        self.log_std[...] = init_log_std

    @classmethod
    def create(cls, n_in, n_act, rng, hidden=HIDDEN, in_scale=None, **kw):
        return cls((n_in, *hidden, n_act), rng, in_scale=in_scale, **kw)

    @property
    def sizes(self):
        return self.net.sizes

    @property
    def act_dim(self) -> int:
        return self.net.sizes[-1]

    def set_params(self, flat) -> None:
        self.params[...] = flat

    def copy(self):
        out = type(self)(self.sizes, in_scale=self.net.in_scale, offset=self.net.offset)
        out.set_params(self.params)
        return out

    def mean(self, obs) -> np.ndarray:
        return self.net.forward(obs)

    def deterministic_action(self, obs) -> np.ndarray:
        return self.mean(obs)

    def _logp(self, mu, action):
        z = (np.asarray(action, dtype=float) - mu) * np.exp(-self.log_std)
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) - 0.5 * self.act_dim * LOG_2PI

    def sample(self, obs, rng):
        mu = self.mean(obs)
        action = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        return action, self._logp(mu, action)

    def log_prob(self, obs, action) -> np.ndarray:
        return self._logp(self.mean(obs), action)

    def entropy(self) -> float:
        return float(np.sum(self.log_std) + 0.5 * self.act_dim * (LOG_2PI + 1.0))

    def logp_and_backward(self, obs, action):
        """Returns ``(logp, backprop)`` where ``backprop(w)`` is the gradient of sum(w * logp)."""
        mu, acts = self.net.forward_cache(obs)
        action = np.asarray(action, dtype=float).reshape(mu.shape)
        inv_var = np.exp(-2.0 * self.log_std)
        diff = action - mu
        logp = self._logp(mu, action)

        def backprop(w):
            g = np.zeros_like(self.params)
            w = np.asarray(w, dtype=float)[:, None]
            self.net.backward(acts, w * diff * inv_var, out=g[: -self.act_dim])
            g[-self.act_dim :] = np.sum(w * (diff * diff * inv_var - 1.0), axis=0)
            return g

        return logp, backprop

    def entropy_grad(self) -> np.ndarray:
        g = np.zeros_like(self.params)
        g[-self.act_dim :] = 1.0
        return g


def one_hot(index, n: int = 3) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros(index.shape + (n,))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class CategoricalPolicy:
    """Softmax over MLP logits. Actions are integer indices."""

    kind = KIND_CATEGORICAL

    def __init__(self, sizes, rng=None, in_scale=None, out_gain=0.01, offset=None):
        self.net = Mlp(sizes, rng, out_gain=out_gain, in_scale=in_scale, offset=offset)
        self.params = self.net.params

    @classmethod
    def create(cls, n_in, n_act, rng, hidden=HIDDEN, in_scale=None, **kw):
        return cls((n_in, *hidden, n_act), rng, in_scale=in_scale, **kw)

    @property
    def sizes(self):
        return self.net.sizes

    @property
    def act_dim(self) -> int:
        return self.net.sizes[-1]

    def set_params(self, flat) -> None:
        self.params[...] = flat

    def copy(self):
        out = type(self)(self.sizes, in_scale=self.net.in_scale, offset=self.net.offset)
        out.set_params(self.params)
        return out

    def logits(self, obs) -> np.ndarray:
        return self.net.forward(obs)

    def probabilities(self, obs) -> np.ndarray:
        return np.exp(_log_softmax(self.logits(obs)))

    def deterministic_action(self, obs):
        return np.argmax(self.logits(obs), axis=-1)

    def sample(self, obs, rng):
        logp_all = _log_softmax(self.logits(obs))
        p = np.exp(logp_all)
        u = rng.random(p.shape[:-1] + (1,))
        idx = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)
        return idx, np.take_along_axis(logp_all, idx[..., None], axis=-1)[..., 0]

    def log_prob(self, obs, action) -> np.ndarray:
        logp_all = _log_softmax(self.logits(obs))
        action = np.asarray(action, dtype=np.int64)
        return np.take_along_axis(logp_all, action[..., None], axis=-1)[..., 0]

    def entropy(self, obs=None) -> float:
        logp = _log_softmax(self.logits(obs))
        return float(np.mean(-np.sum(np.exp(logp) * logp, axis=-1)))

    def logp_and_backward(self, obs, action):
        z, acts = self.net.forward_cache(obs)
        logp_all = _log_softmax(z)
        p = np.exp(logp_all)
        action = np.asarray(action, dtype=np.int64).reshape(-1)
        hot = one_hot(action, self.act_dim)
        logp = np.sum(logp_all * hot, axis=-1)
        self._ent_cache = (acts, p, logp_all)

        def backprop(w):
            w = np.asarray(w, dtype=float)[:, None]
            return self.net.backward(acts, w * (hot - p))

        return logp, backprop

    def entropy_grad(self) -> np.ndarray:
        """Gradient of the batch-mean entropy from the last ``logp_and_backward`` call."""
        acts, p, logp_all = self._ent_cache
        h = -np.sum(p * logp_all, axis=-1, keepdims=True)
        dz = -p * (logp_all + h) / p.shape[0]
        return self.net.backward(acts, dz)


# -- optimizer ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 3e-4, **kw) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)

    def copy(self) -> AdamState:
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2,
                         self.eps)


def adam_update(adam: AdamState, params, grads, max_norm: float | None = None):
    """One bias-corrected Adam step. Returns ``(new_params, new_state)``.

    A non-finite gradient leaves both untouched and logs a warning.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != adam.m.shape:
        raise ValueError("Adam: parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        logger.warning("non-finite gradient, Adam step skipped")
        return params.copy(), adam.copy()
    if max_norm is not None:
        norm = float(np.linalg.norm(grads))
        if norm > max_norm:
            grads = grads * (max_norm / norm)
    step = adam.step + 1
    m = adam.beta1 * adam.m + (1.0 - adam.beta1) * grads
    v = adam.beta2 * adam.v + (1.0 - adam.beta2) * grads * grads
    m_hat = m / (1.0 - adam.beta1**step)
    v_hat = v / (1.0 - adam.beta2**step)
    new = params - adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps)
    return new, AdamState(m, v, step, adam.lr, adam.beta1, adam.beta2, adam.eps)


# -- gradient checking ------------------------------------------------------------------


def grad_check(loss_and_grad, params, h_fd: float = 1e-5, coords=None, floor: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(params) -> (loss, grad)`` must evaluate at the given flat vector.
    ``coords`` restricts the check to a subset of indices.
    """
    if not h_fd > 0:
        raise ValueError("h_fd must be positive")
    params = np.array(params, dtype=float)
    loss, grad = loss_and_grad(params.copy())
    if np.ndim(loss) != 0:
        raise ValueError("grad_check needs a scalar loss")
    idx = np.arange(params.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        p = params.copy()
        p[i] += h_fd
        fp = loss_and_grad(p)[0]
        p[i] -= 2 * h_fd
        fm = loss_and_grad(p)[0]
        fd = (fp - fm) / (2 * h_fd)
        denom = max(abs(fd), abs(grad[i]), floor)
        worst = max(worst, abs(fd - grad[i]) / denom)
    return worst


# -- checkpoints --------------------------------------------------------------------------


def save_checkpoint(path, model, adam: AdamState | None = None, metadata: dict | None = None) -> None:
    sizes = model.sizes
    header = MAGIC + struct.pack("<III", VERSION, model.kind, len(sizes) - 1)
    header += struct.pack(f"<{len(sizes)}I", *sizes)
    parts = [header, np.asarray(model.net.in_scale, "<f8").tobytes(),
             np.asarray(model.net.offset, "<f8").tobytes(), np.asarray(model.params, "<f8").tobytes()]
    if adam is None:
        parts.append(struct.pack("<I", 0))
    else:
        parts.append(struct.pack("<IQdddd", 1, adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps))
        parts += [np.asarray(adam.m, "<f8").tobytes(), np.asarray(adam.v, "<f8").tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))
    meta = {"format": "quadrl-net", "version": VERSION, "kind": model.kind, "sizes": list(sizes)}
    meta.update(metadata or {})
    with open(f"{path}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _read(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def load_checkpoint(path):
    """Returns ``(model, adam_or_None, metadata)``."""
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise ValueError(f"{path}: not a network checkpoint")
        version, kind, nlayers = struct.unpack("<III", _read(fh, 12))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        sizes = struct.unpack(f"<{nlayers + 1}I", _read(fh, 4 * (nlayers + 1)))
        in_scale = np.frombuffer(_read(fh, 8 * sizes[0]), "<f8").astype(float)
        offset = np.frombuffer(_read(fh, 8 * sizes[-1]), "<f8").astype(float)
        if kind == KIND_GAUSSIAN:
            model = GaussianPolicy(sizes, in_scale=in_scale, offset=offset)
        elif kind == KIND_CATEGORICAL:
            model = CategoricalPolicy(sizes, in_scale=in_scale, offset=offset)
        elif kind == KIND_REGRESSOR:
            model = Regressor(sizes, in_scale=in_scale, offset=offset)
        else:
            raise ValueError(f"{path}: unknown network kind {kind}")
        n = model.params.size
        model.params[...] = np.frombuffer(_read(fh, 8 * n), "<f8")
        (has_adam,) = struct.unpack("<I", _read(fh, 4))
        adam = None
        if has_adam:
            step, lr, b1, b2, eps = struct.unpack("<Qdddd", _read(fh, 40))
            m = np.frombuffer(_read(fh, 8 * n), "<f8").astype(float)
            v = np.frombuffer(_read(fh, 8 * n), "<f8").astype(float)
            adam = AdamState(m, v, step, lr, b1, b2, eps)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes in checkpoint")
    if not np.all(np.isfinite(model.params)):
        raise ValueError(f"{path}: non-finite parameters")
    try:
        with open(f"{path}.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = {}
    return model, adam, meta
