"""Dilated 1-D convolutional classifier with statistics pooling, in numpy.

Model inputs are ``(batch, frames, channels)``; internally activations are
time-major, ``(frames, batch, channels)``, so every dilated tap of a
convolution is a contiguous slice. Feature matrices arrive as
``(bins, frames)`` and are transposed on entry.

Layer stack (conv -> ReLU -> batch-norm for each hidden layer)::

    conv 32 k5 d1 | conv 32 k3 d2 | conv 32 k3 d3 | conv 64 k1 d1
    stats pooling (mean, std) -> 128
    FC 64 -> ReLU -> batch-norm -> dropout
    affine -> softmax
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TDNN_LAYERS = ((32, 5, 1), (32, 3, 2), (32, 3, 3), (64, 1, 1))
FC_DIM = 64
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
POOL_EPS = 1e-10
RECEPTIVE_FIELD = 1 + sum((k - 1) * d for _, k, d in TDNN_LAYERS)

CKPT_MAGIC = b"CQSERCKP"
CKPT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# layer primitives (forward returns (out, cache); backward consumes cache)

def conv1d_forward(x, w, b, dilation):
    """Valid dilated convolution. x: (T, B, C_in), w: (C_out, C_in, K) -> (T', B, C_out)."""
    n_out, n_in, k = w.shape
    t_in, n_batch, _ = x.shape
    t_out = t_in - (k - 1) * dilation
    if t_out < 1:
        raise ValueError(
            f"{t_in} frames is too short for kernel {k} with dilation {dilation}")
    taps = np.ascontiguousarray(w.transpose(2, 1, 0))  # (K, C_in, C_out)
    y = x[:t_out].reshape(-1, n_in) @ taps[0]
    for j in range(1, k):
        y += x[j * dilation:j * dilation + t_out].reshape(-1, n_in) @ taps[j]
    y += b
    return y.reshape(t_out, n_batch, n_out), (x, taps, dilation)


def conv1d_backward(dy, cache, need_dx=True):
    x, taps, dilation = cache
    k, n_in, n_out = taps.shape
    t_out = dy.shape[0]
    dy2 = dy.reshape(-1, n_out)
    dtaps = np.stack([x[j * dilation:j * dilation + t_out].reshape(-1, n_in).T @ dy2
                      for j in range(k)])
    dw = dtaps.transpose(2, 1, 0)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    if k == 1:
        return (dy2 @ taps[0].T).reshape(x.shape), dw, db
    dx = np.zeros_like(x)
    for j in range(k):
        dx[j * dilation:j * dilation + t_out] += (dy2 @ taps[j].T).reshape(t_out, *x.shape[1:])
    return dx, dw, db


def relu_forward(x, inplace=False):
    out = np.maximum(x, 0, out=x if inplace else None)
    return out, out


def relu_backward(dy, out):
    return dy * (out > 0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    """Normalises over every axis but the last. Updates running stats in place when training."""
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    if train:
        mu = x2.mean(axis=0)
        xhat = x2 - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / x2.shape[0]
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mu
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * var
    else:
        xhat, var = x2 - running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat *= inv_std
    out = xhat * gamma
    out += beta
    return out.reshape(shape), (xhat, inv_std, gamma, train)


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma, train = cache
    shape = dy.shape
    dy2 = dy.reshape(-1, shape[-1])
    dgamma = np.einsum("ij,ij->j", dy2, xhat)
    dbeta = dy2.sum(axis=0)
    if not train:
        return (dy2 * (gamma * inv_std)).reshape(shape), dgamma, dbeta
    n = dy2.shape[0]
    # with dxhat = gamma * dy, sum(dxhat) = gamma * dbeta and sum(dxhat * xhat) = gamma * dgamma
    dx = dy2 * n
    dx -= dbeta
    dx -= xhat * dgamma
    dx *= gamma * inv_std / n
    return dx.reshape(shape), dgamma, dbeta


def stats_pool_forward(x, min_frames=2):
    """(T, B, C) -> (B, 2C): per-channel mean and population std over frames.

    The model passes ``min_frames=1`` so a receptive-field-length input, which
    leaves one frame, still pools (its std is sqrt(POOL_EPS)).
    """
    if x.shape[0] < min_frames:
        raise ValueError(f"statistics pooling needs at least {min_frames} frames")
    mu = x.mean(axis=0)
    centered = x - mu
    std = np.sqrt((centered ** 2).mean(axis=0) + POOL_EPS)
    return np.concatenate([mu, std], axis=1), (centered, std)


def stats_pool_backward(dy, cache):
    centered, std = cache
    t, _, c = centered.shape
    dmu, dstd = dy[:, :c], dy[:, c:]
    return dmu / t + centered * (dstd / (t * std))


def stats_pool(x):
    """Pool a (T, C) matrix to a 2C vector, or (T, B, C) to (B, 2C)."""
    if x.ndim == 2:
        return stats_pool_forward(x[:, None, :])[0][0]
    return stats_pool_forward(x)[0]


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = logits.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


# --------------------------------------------------------------------------
# model

class TdnnModel:
    def __init__(self, n_in: int, n_classes: int, seed: int = 0, dtype=np.float32,
                 dropout_p: float = 0.3, layers=TDNN_LAYERS, fc_dim: int = FC_DIM):
        self.n_in = int(n_in)
        self.n_classes = int(n_classes)
        self.dtype = np.dtype(dtype)
        self.dropout_p = float(dropout_p)
        self.layers = tuple(tuple(l) for l in layers)
        self.fc_dim = int(fc_dim)
        rng = np.random.default_rng(seed)
        self.params: dict = {}
        self.buffers: dict = {}
        c_in = self.n_in
        for i, (c_out, k, _) in enumerate(self.layers):
            self.params[f"conv{i}.weight"] = rng.standard_normal((c_out, c_in, k)) * np.sqrt(2.0 / (c_in * k))
            self.params[f"conv{i}.bias"] = np.zeros(c_out)
            self.params[f"bn{i}.gamma"] = np.ones(c_out)
            self.params[f"bn{i}.beta"] = np.zeros(c_out)
            self.buffers[f"bn{i}.running_mean"] = np.zeros(c_out)
            self.buffers[f"bn{i}.running_var"] = np.ones(c_out)
            c_in = c_out
        pooled = 2 * c_in
        self.params["fc.weight"] = rng.standard_normal((pooled, self.fc_dim)) * np.sqrt(2.0 / pooled)
        self.params["fc.bias"] = np.zeros(self.fc_dim)
        self.params["bn_fc.gamma"] = np.ones(self.fc_dim)
        self.params["bn_fc.beta"] = np.zeros(self.fc_dim)
        self.buffers["bn_fc.running_mean"] = np.zeros(self.fc_dim)
        self.buffers["bn_fc.running_var"] = np.ones(self.fc_dim)
        self.params["out.weight"] = rng.standard_normal((self.fc_dim, self.n_classes)) * np.sqrt(1.0 / self.fc_dim)
        self.params["out.bias"] = np.zeros(self.n_classes)
        for d in (self.params, self.buffers):
            for name in d:
                d[name] = d[name].astype(self.dtype)

    @property
    def pooled_dim(self) -> int:
        return 2 * self.layers[-1][0]

    @property
    def receptive_field(self) -> int:
        return 1 + sum((k - 1) * d for _, k, d in self.layers)

    def output_frames(self, t: int) -> list:
        out = [t]
        for _, k, d in self.layers:
            out.append(out[-1] - (k - 1) * d)
        return out

    def arch_description(self) -> dict:
        return {"n_in": self.n_in, "n_classes": self.n_classes, "layers": self.layers,
                "fc_dim": self.fc_dim,
                "tensors": [(n, list(a.shape)) for n, a in self.state().items()]}

    def arch_hash(self) -> bytes:
        return hashlib.sha256(json.dumps(self.arch_description(), sort_keys=True).encode()).digest()

    def state(self) -> dict:
        return {**self.params, **self.buffers}

    def load_state(self, state: dict):
        for name in self.params:
            self.params[name] = np.array(state[name], dtype=self.dtype)
        for name in self.buffers:
            self.buffers[name] = np.array(state[name], dtype=self.dtype)

    def copy(self) -> "TdnnModel":
        return copy.deepcopy(self)

    # forward / backward -----------------------------------------------------

    def forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None):
        """x: (B, T, n_in) -> logits (B, K) and a cache for :meth:`backward`.

        In train mode, batch statistics are used (and running stats updated)
        and dropout is applied to the FC output when ``rng`` is given.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise ValueError(f"expected input (batch, frames, {self.n_in}), got {x.shape}")
        if x.shape[1] < self.receptive_field:
            raise ValueError(f"{x.shape[1]} frames is below the receptive field {self.receptive_field}")
        p, caches = self.params, []
        h = np.ascontiguousarray(x.transpose(1, 0, 2))
        for i, (_, _, d) in enumerate(self.layers):
            h, c_conv = conv1d_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], d)
            h, c_relu = relu_forward(h, inplace=True)
            h, c_bn = batchnorm_forward(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                                        self.buffers[f"bn{i}.running_mean"],
                                        self.buffers[f"bn{i}.running_var"], train)
            caches.append((c_conv, c_relu, c_bn))
        h, c_pool = stats_pool_forward(h, min_frames=1)
        pooled = h
        h = h @ p["fc.weight"] + p["fc.bias"]
        h, c_fc_relu = relu_forward(h, inplace=True)
        h, c_fc_bn = batchnorm_forward(h, p["bn_fc.gamma"], p["bn_fc.beta"],
                                       self.buffers["bn_fc.running_mean"],
                                       self.buffers["bn_fc.running_var"], train)
        mask = None
        if train and rng is not None and self.dropout_p > 0:
            keep = 1.0 - self.dropout_p
            mask = ((rng.random(h.shape) < keep) / keep).astype(self.dtype)
            h = h * mask
        fc_out = h
        logits = h @ p["out.weight"] + p["out.bias"]
        cache = (caches, c_pool, pooled, c_fc_relu, c_fc_bn, mask, fc_out)
        return logits, cache

    def backward(self, cache, dlogits, need_input_grad: bool = True) -> dict:
        caches, c_pool, pooled, c_fc_relu, c_fc_bn, mask, fc_out = cache
        p, g = self.params, {}
        g["out.weight"] = fc_out.T @ dlogits
        g["out.bias"] = dlogits.sum(axis=0)
        dh = dlogits @ p["out.weight"].T
        if mask is not None:
            dh = dh * mask
        dh, g["bn_fc.gamma"], g["bn_fc.beta"] = batchnorm_backward(dh, c_fc_bn)
        dh = relu_backward(dh, c_fc_relu)
        g["fc.weight"] = pooled.T @ dh
        g["fc.bias"] = dh.sum(axis=0)
        dh = dh @ p["fc.weight"].T
        dh = stats_pool_backward(dh, c_pool)
        for i in reversed(range(len(self.layers))):
            c_conv, c_relu, c_bn = caches[i]
            dh, g[f"bn{i}.gamma"], g[f"bn{i}.beta"] = batchnorm_backward(dh, c_bn)
            dh = relu_backward(dh, c_relu)
            need_dx = i > 0 or need_input_grad
            dh, g[f"conv{i}.weight"], g[f"conv{i}.bias"] = conv1d_backward(dh, c_conv, need_dx)
        if need_input_grad:
            g["input"] = dh.transpose(1, 0, 2)
        return g

    def predict_proba(self, features) -> np.ndarray:
        """Eval-mode class probabilities for one (bins, T) utterance matrix."""
        x = np.asarray(features, dtype=self.dtype).T
        if x.shape[0] < self.receptive_field:
            x = x[np.arange(self.receptive_field) % x.shape[0]]
        logits, _ = self.forward(x[None], train=False)
        return softmax(logits.astype(np.float64))[0]


def predict_utterance(model: TdnnModel, features):
    """Label (argmax, ties to the lowest index) and probabilities for a full utterance."""
    probs = model.predict_proba(features)
    return int(np.argmax(probs)), probs


# --------------------------------------------------------------------------
# optimisation

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def adam_step(params: dict, grads: dict, opt: Adam):
    opt.step(params, grads)


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    dropout: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class Checkpoint:
    state: dict
    epoch: int
    val_uar: float
    rng_state: dict
    n_in: int
    n_classes: int
    dropout: float = 0.3
    log: list = field(default_factory=list)

    def to_model(self) -> TdnnModel:
        model = TdnnModel(self.n_in, self.n_classes, dropout_p=self.dropout)
        model.load_state(self.state)
        return model


def unweighted_recall(labels, preds, n_classes) -> float:
    """Mean recall over the classes present in ``labels``."""
    labels, preds = np.asarray(labels), np.asarray(preds)
    recalls = [np.mean(preds[labels == c] == c) for c in range(n_classes) if np.any(labels == c)]
    return float(np.mean(recalls))


def train(model: TdnnModel, train_chunks: Sequence, val_utterances: Sequence,
          cfg: TrainConfig, log_fh=None) -> Checkpoint:
    """Minibatch Adam training; returns the epoch with the best validation UAR.

    ``train_chunks`` holds objects with ``values`` (bins, T) and integer
    ``label``; ``val_utterances`` holds (bins, T) matrices paired with labels.
    """
    if not train_chunks or not val_utterances:
        raise ValueError("training needs non-empty train and validation sets")
    x = np.stack([np.asarray(c.values).T for c in train_chunks]).astype(model.dtype)
    y = np.array([c.label for c in train_chunks])
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    val_x = [np.asarray(v) for v, _ in val_utterances]
    val_y = [int(l) for _, l in val_utterances]
    model.dropout_p = cfg.dropout
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    best: Optional[Checkpoint] = None
    log = []
    n = len(y)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if idx.size < 2 and n >= 2:
                continue  # a single-sample batch has no FC batch statistics
            logits, cache = model.forward(x[idx], train=True, rng=rng)
            loss, dlogits = softmax_cross_entropy(logits.astype(np.float64), y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {s}")
            grads = model.backward(cache, dlogits.astype(model.dtype), need_input_grad=False)
            opt.step(model.params, grads)
            losses.append(loss)
        preds = [predict_utterance(model, v)[0] for v in val_x]
        val_uar = unweighted_recall(val_y, preds, model.n_classes)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_uar": val_uar}
        log.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry) + "\n")
        if best is None or val_uar > best.val_uar:
            best = Checkpoint(copy.deepcopy(model.state()), epoch, val_uar,
                              copy.deepcopy(rng.bit_generator.state), model.n_in,
                              model.n_classes, model.dropout_p)
    best.log = log
    return best


# --------------------------------------------------------------------------
# checkpoint file

def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    model = ckpt.to_model()
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", CKPT_VERSION))
    out.write(model.arch_hash())
    out.write(struct.pack("<IIIdd", ckpt.n_in, ckpt.n_classes, ckpt.epoch,
                          ckpt.val_uar, ckpt.dropout))
    state = model.state()
    out.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(ckpt.state[name], dtype="<f4").tobytes())
    rng_raw = json.dumps(ckpt.rng_state, sort_keys=True).encode()
    out.write(struct.pack("<I", len(rng_raw)))
    out.write(rng_raw)
    return out.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    off = 8
    (version,) = struct.unpack_from("<I", data, off)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 4
    arch = data[off:off + 32]
    off += 32
    n_in, n_classes, epoch, val_uar, dropout = struct.unpack_from("<IIIdd", data, off)
    off += struct.calcsize("<IIIdd")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        state[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
    (ln,) = struct.unpack_from("<I", data, off)
    off += 4
    rng_state = json.loads(data[off:off + ln].decode())
    ckpt = Checkpoint(state, epoch, val_uar, rng_state, n_in, n_classes, dropout)
    if ckpt.to_model().arch_hash() != arch:
        raise ValueError("checkpoint architecture hash mismatch")
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
