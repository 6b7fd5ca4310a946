"""Minimal trainable neural core: dense and LSTM layers, softmax cross-entropy,
inverted dropout, Adam, a finite-difference gradient checker, and checkpoint I/O.

All math runs in float64; checkpoints serialize parameters as float32 LE.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "PMTL-CKPT-1"


class ShapeError(ValueError):
    """Raised on inconsistent array shapes."""


class NumericsError(FloatingPointError):
    """Raised on non-finite inputs or gradients."""


def _glorot(shape: tuple[int, int], rng: np.random.Generator | None) -> np.ndarray:
    if rng is None:
        return np.zeros(shape)
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class DenseLayer:
    """Fully connected layer Y = act(X W^T + b) with relu/sigmoid/linear activations."""

    ACTIVATIONS = ("relu", "sigmoid", "linear")

    def __init__(self, n_in: int, n_out: int, activation: str = "linear",
                 rng: np.random.Generator | None = None):
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unknown activation: {activation!r}")
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.w = _glorot((n_out, n_in), rng)
        self.b = np.zeros(n_out)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"expected (batch, {self.n_in}), got {x.shape}")
        z = x @ self.w.T + self.b
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "sigmoid":
            y = 1.0 / (1.0 + np.exp(-z))
        else:
            y = z
        return y, (x, z, y)

    def backward(self, dy: np.ndarray, cache):
        x, z, y = cache
        if self.activation == "relu":
            dz = dy * (z > 0.0)
        elif self.activation == "sigmoid":
            dz = dy * y * (1.0 - y)
        else:
            dz = dy
        grads = {"w": dz.T @ x, "b": dz.sum(axis=0)}
        return dz @ self.w, grads


class LSTMLayer:
    """Single-direction LSTM over (batch, time, features) sequences.

    Gate parameters are stored stacked in (i, f, g, o) order: ``w_x`` maps the
    input, ``w_h`` the previous hidden state. The forget-gate bias slice is
    initialized to 1.0.
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator | None = None,
                 forget_bias: float = 1.0):
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.w_x = _glorot((4 * n_hidden, n_in), rng)
        self.w_h = _glorot((4 * n_hidden, n_hidden), rng)
        self.b = np.zeros(4 * n_hidden)
        self.b[n_hidden : 2 * n_hidden] = forget_bias

    def _gate_slice(self, gate: str) -> slice:
        order = {"i": 0, "f": 1, "g": 2, "o": 3}[gate]
        return slice(order * self.n_hidden, (order + 1) * self.n_hidden)

    @property
    def w_xi(self): return self.w_x[self._gate_slice("i")]
    @property
    def w_xf(self): return self.w_x[self._gate_slice("f")]
    @property
    def w_xg(self): return self.w_x[self._gate_slice("g")]
    @property
    def w_xo(self): return self.w_x[self._gate_slice("o")]
    @property
    def w_hi(self): return self.w_h[self._gate_slice("i")]
    @property
    def w_hf(self): return self.w_h[self._gate_slice("f")]
    @property
    def w_hg(self): return self.w_h[self._gate_slice("g")]
    @property
    def w_ho(self): return self.w_h[self._gate_slice("o")]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w_x": self.w_x, "w_h": self.w_h, "b": self.b}

    def forward(self, x: np.ndarray, h0: np.ndarray | None = None, c0: np.ndarray | None = None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise ShapeError(f"expected (batch, time, {self.n_in}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NumericsError("non-finite input to LSTM")
        batch, time, _ = x.shape
        hsz = self.n_hidden
        h = np.zeros((batch, hsz)) if h0 is None else np.array(h0, dtype=np.float64)
        c = np.zeros((batch, hsz)) if c0 is None else np.array(c0, dtype=np.float64)

        xw = x @ self.w_x.T  # (batch, time, 4H), hoisted out of the loop
        gates = np.empty((batch, time, 4 * hsz))
        cells = np.empty((batch, time, hsz))
        cell_tanh = np.empty((batch, time, hsz))
        hidden = np.empty((batch, time, hsz))
        h_prev = np.empty((batch, time, hsz))
        c_prev0 = c.copy()

        for t in range(time):
            h_prev[:, t] = h
            a = xw[:, t] + h @ self.w_h.T + self.b
            i = 1.0 / (1.0 + np.exp(-a[:, :hsz]))
            f = 1.0 / (1.0 + np.exp(-a[:, hsz : 2 * hsz]))
            g = np.tanh(a[:, 2 * hsz : 3 * hsz])
            o = 1.0 / (1.0 + np.exp(-a[:, 3 * hsz :]))
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            gates[:, t, :hsz] = i
            gates[:, t, hsz : 2 * hsz] = f
            gates[:, t, 2 * hsz : 3 * hsz] = g
            gates[:, t, 3 * hsz :] = o
            cells[:, t] = c
            cell_tanh[:, t] = tc
            hidden[:, t] = h
        cache = (x, gates, cells, cell_tanh, h_prev, c_prev0)
        return hidden, cache

    def backward(self, dh_seq: np.ndarray, cache):
        x, gates, cells, cell_tanh, h_prev, c_prev0 = cache
        batch, time, hsz = cells.shape
        da_all = np.empty((batch, time, 4 * hsz))
        dh = np.zeros((batch, hsz))
        dc = np.zeros((batch, hsz))
        for t in range(time - 1, -1, -1):
            i = gates[:, t, :hsz]
            f = gates[:, t, hsz : 2 * hsz]
            g = gates[:, t, 2 * hsz : 3 * hsz]
            o = gates[:, t, 3 * hsz :]
            tc = cell_tanh[:, t]
            c_before = cells[:, t - 1] if t > 0 else c_prev0
            dh = dh + dh_seq[:, t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * g
            df = dc * c_before
            dg = dc * i
            da = da_all[:, t]
            da[:, :hsz] = di * i * (1.0 - i)
            da[:, hsz : 2 * hsz] = df * f * (1.0 - f)
            da[:, 2 * hsz : 3 * hsz] = dg * (1.0 - g * g)
            da[:, 3 * hsz :] = do * o * (1.0 - o)
            dh = da @ self.w_h
            dc = dc * f
        flat_da = da_all.reshape(-1, 4 * hsz)
        grads = {
            "w_x": flat_da.T @ x.reshape(-1, self.n_in),
            "w_h": flat_da.T @ h_prev.reshape(-1, hsz),
            "b": flat_da.sum(axis=0),
        }
        dx = da_all @ self.w_x
        return dx, grads, dh, dc


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= n_classes):
        raise ShapeError("labels must be a 1-D vector of class indices")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def softmax_xent(logits: np.ndarray, targets: np.ndarray):
    """Mean categorical cross-entropy with a log-sum-exp-stabilized softmax.

    Returns (loss, probs, dlogits) where dlogits = (probs - targets) / batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError("logits must be (batch, K) with K >= 2")
    if targets.shape != logits.shape:
        raise ShapeError("targets shape must match logits")
    is_binary = (targets == 0.0) | (targets == 1.0)
    if not np.all(is_binary) or not np.all(targets.sum(axis=1) == 1.0):
        raise ValueError("target rows must be one-hot")
    batch = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    loss = float(-np.sum(targets * log_probs) / batch)
    dlogits = (probs - targets) / batch
    return loss, probs, dlogits


@dataclass(frozen=True)
class DropoutSpec:
    p: float = 0.5
    mode: str = "train"

    def __post_init__(self):
        if not (0.0 <= self.p < 1.0):
            raise ValueError("drop probability must be in [0, 1)")
        if self.mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")


def dropout(x: np.ndarray, spec: DropoutSpec, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns (output, scale_mask); the mask is None in eval mode."""
    if spec.mode == "eval" or spec.p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= spec.p
    mask = keep / (1.0 - spec.p)
    return x * mask, mask


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float = 3e-3) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            lr=lr,
        )


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """One bias-corrected Adam update, in place. Returns the params dict."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name!r}")
    state.t += 1
    b1c = 1.0 - state.beta1 ** state.t
    b2c = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
    return params


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm. Returns the raw norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return float(norm)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: int
    n_checked: int


def grad_check(loss_fn, params: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
               n_samples: int = 40, h: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients to central finite differences on a seeded
    random subset of parameter coordinates.

    ``loss_fn`` must recompute the scalar loss from the current contents of
    ``params`` (which are perturbed in place and restored).
    """
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = (0.0, names[0], 0)
    for flat in sorted(int(i) for i in picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        idx = flat - int(offsets[which])
        arr = params[name]
        orig = arr.flat[idx]
        arr.flat[idx] = orig + h
        loss_plus = loss_fn()
        arr.flat[idx] = orig - h
        loss_minus = loss_fn()
        arr.flat[idx] = orig
        fd = (loss_plus - loss_minus) / (2.0 * h)
        an = analytic[name].flat[idx]
        rel = abs(fd - an) / max(abs(fd) + abs(an), 1e-12)
        if rel > worst[0]:
            worst = (rel, name, idx)
    return GradCheckReport(max_rel_err=worst[0], worst_param=worst[1],
                           worst_index=worst[2], n_checked=len(picks))


# ---------------------------------------------------------------------------
# Checkpoints: u32 LE header length, JSON header, float32 LE parameter blob
# in the header's documented parameter order.
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], header: dict | None = None) -> Path:
    entries = [{"name": name, "shape": list(np.asarray(arr).shape)} for name, arr in params.items()]
    full_header = dict(header or {})
    full_header["format"] = CHECKPOINT_FORMAT
    full_header["dtype"] = "<f4"
    full_header["params"] = entries
    blob = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in params.values())
    head = json.dumps(full_header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        (head_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(head_len).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
        params: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4")
            if data.size != count:
                raise ValueError(f"truncated checkpoint: {path}")
            params[entry["name"]] = data.reshape(shape).astype(np.float64)
    return params, header
