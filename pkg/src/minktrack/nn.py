"""Small differentiable building blocks with explicit backward passes.

Tensors are plain float64 numpy arrays. Layers own named entries in a
:class:`ParamStore` and cache whatever their backward pass needs on ``self``,
so one layer instance serves one graph at a time.
"""
from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

PROB_EPS = 1e-7
CHECKPOINT_MAGIC = b"MINKTRK\x00"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised when tensor shapes or hyperparameters do not fit together."""


class GradCheckError(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


class ParamStore:
    """Named parameters, their gradient accumulators and AdamW state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self._binding = False

    @contextmanager
    def binding(self):
        """Within this block, layers constructed on the store attach to the
        parameters already present instead of registering new ones."""
        self._binding = True
        try:
            yield self
        finally:
            self._binding = False

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            if self._binding and self.params[name].shape == np.shape(value):
                return self.params[name]
            raise ConfigurationError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        g = self.grads[name]
        if g.shape != np.shape(grad):
            raise ConfigurationError(
                f"gradient shape {np.shape(grad)} != parameter shape {g.shape} for {name!r}")
        g += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def grad_norm(self, prefix: str = "") -> float:
        total = 0.0
        for name, g in self.grads.items():
            if name.startswith(prefix):
                total += float(np.dot(g.ravel(), g.ravel()))
        return float(np.sqrt(total))

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def adamw_step(params: ParamStore, lr: float, weight_decay: float = 0.0,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Decoupled-weight-decay Adam update; clears the gradients afterwards."""
    b1, b2 = betas
    params.step += 1
    bc1 = 1.0 - b1 ** params.step
    bc2 = 1.0 - b2 ** params.step
    for name, w in params.params.items():
        g = params.grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            w *= 1.0 - lr * weight_decay
        w -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    params.zero_grad()


def one_cycle_lr(step: int, total: int, max_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine one-cycle schedule (warm up to ``max_lr`` then anneal)."""
    total = max(total, 1)
    warm = max(int(total * pct_start), 1)
    lo = max_lr / div_factor
    if step < warm:
        frac = step / warm
        return lo + (max_lr - lo) * 0.5 * (1 - np.cos(np.pi * frac))
    frac = min((step - warm) / max(total - warm, 1), 1.0)
    end = lo / final_div
    return end + (max_lr - end) * 0.5 * (1 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# layers


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))


class Linear:
    """``y = x @ W + b`` over the innermost axis."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: Optional[np.random.Generator] = None, init: str = "he"):
        self.store = store
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "zeros":
            w = np.zeros((n_in, n_out))
        elif init == "identity":
            w = np.eye(n_in, n_out)
        else:
            w = he_init(rng, (n_in, n_out), n_in)
        store.add(f"{name}.weight", w)
        store.add(f"{name}.bias", np.zeros(n_out))
        self._x = None

    @property
    def weight(self) -> np.ndarray:
        return self.store[f"{self.name}.weight"]

    @property
    def bias(self) -> np.ndarray:
        return self.store[f"{self.name}.bias"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ConfigurationError(
                f"{self.name}: input width {x.shape[-1]} != expected {self.n_in}")
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.n_in)
        d2 = dout.reshape(-1, self.n_out)
        self.store.accumulate(f"{self.name}.weight", x2.T @ d2)
        self.store.accumulate(f"{self.name}.bias", d2.sum(axis=0))
        return dout @ self.weight.T


class MLP:
    """Stack of Linear layers with ReLU between them; the output stays as logits
    unless ``final_activation='relu'``."""

    def __init__(self, store: ParamStore, name: str, widths: list[int],
                 rng: Optional[np.random.Generator] = None,
                 final_activation: Optional[str] = None, zero_last: bool = False):
        if len(widths) < 2:
            raise ConfigurationError("MLP needs at least input and output widths")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = []
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = k == len(widths) - 2
            init = "zeros" if (last and zero_last) else "he"
            self.layers.append(Linear(store, f"{name}.{k}", a, b, rng=rng, init=init))
        self.final_activation = final_activation
        self._pre = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._pre = []
        h = x
        for k, layer in enumerate(self.layers):
            z = layer.forward(h)
            self._pre.append(z)
            last = k == len(self.layers) - 1
            h = relu(z) if (not last or self.final_activation == "relu") else z
        return h

    def backward(self, dout: np.ndarray) -> np.ndarray:
        d = dout
        for k in range(len(self.layers) - 1, -1, -1):
            last = k == len(self.layers) - 1
            if not last or self.final_activation == "relu":
                d = relu_backward(d, self._pre[k])
            d = self.layers[k].backward(d)
        return d


def mlp_forward(x: np.ndarray, layers: MLP) -> np.ndarray:
    return layers.forward(x)


class Conv2d:
    """Dense stride-1 'same' convolution over (N, C, H, W) batches."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int = 3,
                 rng: Optional[np.random.Generator] = None, init: str = "he",
                 bias_init: float = 0.0, scale: float = 1.0):
        if k % 2 != 1:
            raise ConfigurationError("Conv2d kernel must be odd")
        self.store = store
        self.name = name
        self.c_in, self.c_out, self.k = c_in, c_out, k
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "identity":
            if c_in != c_out:
                raise ConfigurationError("identity init needs c_in == c_out")
            w = np.zeros((c_out, c_in, k, k))
            w[np.arange(c_out), np.arange(c_in), k // 2, k // 2] = 1.0
        elif init == "zeros":
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = scale * he_init(rng, (c_out, c_in, k, k), c_in * k * k)
        store.add(f"{name}.weight", w)
        store.add(f"{name}.bias", np.full(c_out, float(bias_init)))
        self._cols = None
        self._shape = None

    @property
    def weight(self) -> np.ndarray:
        return self.store[f"{self.name}.weight"]

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        """(N * H * W, C * k * k) patch matrix."""
        p = self.k // 2
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * self.k * self.k)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ConfigurationError(f"{self.name}: expected (N, {self.c_in}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        cols = self._im2col(x)
        self._cols = cols
        self._shape = x.shape
        out = cols @ self.weight.reshape(self.c_out, -1).T + self.store[f"{self.name}.bias"]
        return np.ascontiguousarray(out.reshape(n, h, w, self.c_out).transpose(0, 3, 1, 2))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, c, h, w = self._shape
        k, p = self.k, self.k // 2
        g = dout.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        self.store.accumulate(f"{self.name}.weight", (g.T @ self._cols).reshape(self.c_out, c, k, k))
        self.store.accumulate(f"{self.name}.bias", g.sum(axis=0))
        dcols = (g @ self.weight.reshape(self.c_out, -1)).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dcols[..., i, j]
        return np.ascontiguousarray(dxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class FocalLossConfig:
    alpha: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError("focal alpha must be > 0")
        if not self.gamma >= 0:
            raise ConfigurationError("focal gamma must be >= 0")


def binary_focal_loss(logit, is_positive, cfg: FocalLossConfig, alpha=None):
    """Binary focal loss on logits, mean-reduced over samples.

    ``alpha`` may override ``cfg.alpha`` with a per-sample array (per-class
    positive weights). Returns ``(loss, dloss_dlogit)``; for scalar input both
    are floats, otherwise the gradient has the logits' shape.
    """
    scalar = np.ndim(logit) == 0
    z = np.atleast_1d(np.asarray(logit, dtype=np.float64))
    pos = np.broadcast_to(np.atleast_1d(np.asarray(is_positive, dtype=bool)), z.shape)
    a = np.broadcast_to(np.asarray(cfg.alpha if alpha is None else alpha, dtype=np.float64),
                        z.shape)
    g = cfg.gamma
    p_raw = sigmoid(z)
    p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
    free = (p_raw > PROB_EPS) & (p_raw < 1.0 - PROB_EPS)
    q = 1.0 - p
    loss_pos = -a * q ** g * np.log(p)
    loss_neg = -(p ** g) * np.log(q)
    loss = np.where(pos, loss_pos, loss_neg)
    grad_pos = a * q ** g * (g * p * np.log(p) - q)
    grad_neg = p ** g * (p - g * q * np.log(q))
    grad = np.where(pos, grad_pos, grad_neg) * free
    n = z.size
    total = float(np.sum(loss, dtype=np.float64)) / n
    grad = grad / n
    if scalar:
        return total, float(grad[0])
    return total, grad.reshape(np.shape(logit))


def bce_with_logits(logit, is_positive) -> float:
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(is_positive, dtype=np.float64)
    p = np.clip(sigmoid(z), PROB_EPS, 1 - PROB_EPS)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(op: Callable[[np.ndarray], tuple[float, np.ndarray]], point: np.ndarray,
               eps: float = 1e-6, exclude: Optional[np.ndarray] = None,
               max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Compare ``op``'s analytic gradient with central differences.

    ``op(x)`` returns ``(scalar_value, dvalue_dx)``. Coordinates flagged in
    ``exclude`` (for example ReLU inputs sitting exactly on the kink) are left
    out. ``max_coords`` subsamples coordinates for large inputs.
    Returns the worst ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
    where ``floor = 1e-3 * max|analytic|`` over the checked coordinates (and
    at least 1e-10), so coordinates with vanishing gradient are compared on
    the scale of the whole gradient instead of their own.
    """
    x = np.array(point, dtype=np.float64)
    value, analytic = op(x.copy())
    if not np.isfinite(value):
        raise GradCheckError("non-finite forward value at the base point")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape).copy()
    coords = np.arange(x.size)
    if exclude is not None:
        coords = coords[~np.asarray(exclude, dtype=bool).ravel()]
    if max_coords is not None and coords.size > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
    flat = x.ravel()
    a_flat = analytic.ravel()
    numeric = np.zeros(len(coords))
    for n, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + eps
        fp, _ = op(x.copy())
        flat[c] = orig - eps
        fm, _ = op(x.copy())
        flat[c] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"non-finite forward at perturbed coordinate {c}")
        numeric[n] = (fp - fm) / (2 * eps)
    if not len(coords):
        return 0.0
    a = a_flat[coords]
    floor = max(1e-10, 1e-3 * float(np.max(np.abs(a))))
    err = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return float(err.max())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: Optional[dict] = None) -> None:
    """Write named float64 tensors: magic, version, JSON metadata, then per
    tensor a name, shape header and raw little-endian values."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if data[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic string")
        pos = 8
        (version,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            nbytes = 8 * n
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
        if pos != len(data):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return tensors, meta


def store_state(store: ParamStore) -> dict[str, np.ndarray]:
    out = {}
    for name in store.params:
        out[f"param/{name}"] = store.params[name]
        out[f"adam_m/{name}"] = store.m[name]
        out[f"adam_v/{name}"] = store.v[name]
    return out


def restore_state(store: ParamStore, tensors: dict[str, np.ndarray], step: int = 0,
                  strict: bool = True) -> None:
    for name in store.params:
        key = f"param/{name}"
        if key not in tensors:
            if strict:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            continue
        if tensors[key].shape != store.params[name].shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: {tensors[key].shape} vs {store.params[name].shape}")
        store.params[name][...] = tensors[key]
        if f"adam_m/{name}" in tensors:
            store.m[name][...] = tensors[f"adam_m/{name}"]
            store.v[name][...] = tensors[f"adam_v/{name}"]
    store.step = int(step)
    store.zero_grad()
