"""Small convolutional network for 28x28 feature patches, written in numpy.

Layer chain::

    28x28x1 -conv5x5/4-> 24x24x4 -relu-> -maxpool2-> 12x12x4
            -conv7x7/8-> 6x6x8 -relu-> -maxpool2-> 3x3x8 = 72
            -fc-> 256 -dropout-> -fc-> 256 -dropout-> -fc-> arity -softmax->

Training uses momentum SGD with weight decay on weights (not biases)::

    v <- m*v - decay*lr*w - lr*grad ;  w <- w + v
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np

from . import modelio

PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
               "fc1_w", "fc1_b", "fc2_w", "fc2_b", "fc3_w", "fc3_b")
KEEP_PROB = 0.5


def param_shapes(arity: int) -> dict[str, tuple[int, ...]]:
    return {
        "conv1_w": (4, 1, 5, 5), "conv1_b": (4,),
        "conv2_w": (8, 4, 7, 7), "conv2_b": (8,),
        "fc1_w": (72, 256), "fc1_b": (256,),
        "fc2_w": (256, 256), "fc2_b": (256,),
        "fc3_w": (256, arity), "fc3_b": (arity,),
    }


@dataclass
class Network:
    arity: int
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.params["fc3_w"].dtype

    def astype(self, dtype) -> "Network":
        return Network(self.arity, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Network":
        return Network(self.arity, {k: v.copy() for k, v in self.params.items()})


def init_network(arity: int, seed: int = 0, dtype=np.float32) -> Network:
    """Gaussian weights (std 0.01), every bias set to 1."""
    if arity < 2:
        raise ValueError(f"network arity must be >= 2, got {arity}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arity).items():
        if name.endswith("_b"):
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = rng.normal(0.0, 0.01, size=shape).astype(dtype)
    return Network(arity, params)


# ----------------------------------------------------------------------------
# layers; activations are laid out channel-first over the batch: (C, N, H, W)

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C,N,H,W) -> (C*k*k, N*Ho*Wo); row order (c, ky, kx) matches the kernels."""
    c, n, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    out = np.empty((c * k * k, n, ho, wo), x.dtype)
    j = 0
    for ch in range(c):
        for ky in range(k):
            for kx in range(k):
                out[j] = x[ch, :, ky:ky + ho, kx:kx + wo]
                j += 1
    return out.reshape(c * k * k, -1)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    c, n, h, w = shape
    ho, wo = h - k + 1, w - k + 1
    cols = cols.reshape(c * k * k, n, ho, wo)
    out = np.zeros(shape, cols.dtype)
    j = 0
    for ch in range(c):
        for ky in range(k):
            for kx in range(k):
                out[ch, :, ky:ky + ho, kx:kx + wo] += cols[j]
                j += 1
    return out


@numba.njit(cache=True)
def _pool_forward(a):
    """2x2/2 max pooling; argmax index in (dy, dx) row-major, ties to the first."""
    c, n, h, w = a.shape
    out = np.empty((c, n, h // 2, w // 2), a.dtype)
    arg = np.empty((c, n, h // 2, w // 2), np.uint8)
    for ch in range(c):
        for i in range(n):
            for y in range(h // 2):
                for x in range(w // 2):
                    best = a[ch, i, 2 * y, 2 * x]
                    bi = 0
                    for q in range(1, 4):
                        v = a[ch, i, 2 * y + q // 2, 2 * x + q % 2]
                        if v > best:
                            best = v
                            bi = q
                    out[ch, i, y, x] = best
                    arg[ch, i, y, x] = bi
    return out, arg


@numba.njit(cache=True)
def _pool_backward(dout, arg):
    c, n, ho, wo = dout.shape
    d = np.zeros((c, n, 2 * ho, 2 * wo), dout.dtype)
    for ch in range(c):
        for i in range(n):
            for y in range(ho):
                for x in range(wo):
                    q = arg[ch, i, y, x]
                    d[ch, i, 2 * y + q // 2, 2 * x + q % 2] = dout[ch, i, y, x]
    return d


def _as_batch(x, dtype) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (28, 28):
        raise ValueError(f"expected 28x28 patches, got {x.shape[1:]}")
    return x


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(net: Network, x: np.ndarray, masks=None):
    p = net.params
    n = len(x)
    c = {}
    c["c1"] = _im2col(x[None], 5)
    a1 = (p["conv1_w"].reshape(4, -1) @ c["c1"] + p["conv1_b"][:, None]).reshape(4, n, 24, 24)
    c["a1"] = a1
    q1, c["arg1"] = _pool_forward(np.maximum(a1, 0))
    c["q1_shape"] = q1.shape
    c["c2"] = _im2col(q1, 7)
    a2 = (p["conv2_w"].reshape(8, -1) @ c["c2"] + p["conv2_b"][:, None]).reshape(8, n, 6, 6)
    c["a2"] = a2
    q2, c["arg2"] = _pool_forward(np.maximum(a2, 0))
    # flatten per example in (channel, y, x) order
    f0 = np.ascontiguousarray(q2.transpose(1, 0, 2, 3)).reshape(n, 72)
    c["f0"] = f0
    h1 = f0 @ p["fc1_w"] + p["fc1_b"]
    if masks is not None:
        h1 = h1 * masks[0]
    c["h1"] = h1
    h2 = h1 @ p["fc2_w"] + p["fc2_b"]
    if masks is not None:
        h2 = h2 * masks[1]
    c["h2"] = h2
    logits = h2 @ p["fc3_w"] + p["fc3_b"]
    c["shapes"] = [(n, 28, 28, 1), (n, 24, 24, 4), (n, 12, 12, 4), (n, 6, 6, 8),
                   (n, 3, 3, 8), f0.shape, h1.shape, h2.shape, logits.shape]
    return logits, c


def forward(net: Network, patches, mode: str = "eval", rng=None, return_shapes: bool = False):
    """Class probabilities for one patch (vector) or a stack of patches (matrix).

    ``mode="train"`` applies inverted dropout with masks drawn from ``rng``.
    ``return_shapes`` also returns the activation shapes, as (N, H, W, C).
    """
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
    single = np.ndim(patches) == 2
    x = _as_batch(patches, net.dtype)
    masks = None
    if mode == "train":
        masks = dropout_masks(len(x), rng if rng is not None else np.random.default_rng(), net.dtype)
    logits, cache = _forward(net, x, masks)
    probs = _softmax(logits.astype(np.float64))
    out = probs[0] if single else probs
    if return_shapes:
        return out, cache["shapes"]
    return out


def dropout_masks(n: int, rng: np.random.Generator, dtype=np.float32, keep: float = KEEP_PROB):
    """Inverted-dropout masks for the two hidden fc layers: 0 or 1/keep."""
    scale = np.asarray(1.0 / keep, dtype=dtype)
    return tuple((rng.random((n, 256)) < keep).astype(dtype) * scale for _ in range(2))


def loss_and_grad(net: Network, patches, labels, masks=None):
    """Mean softmax cross-entropy over the batch and its batch-averaged gradients.

    ``masks`` fixes the dropout masks (as returned by :func:`dropout_masks`);
    ``None`` means evaluation mode (no dropout).
    """
    x = _as_batch(patches, net.dtype)
    y = np.asarray(labels, dtype=np.int64)
    n = len(x)
    if n == 0:
        raise ValueError("empty batch")
    if y.shape != (n,):
        raise ValueError("one label per patch required")
    if (y < 0).any() or (y >= net.arity).any():
        raise ValueError(f"labels must lie in [0, {net.arity})")
    p = net.params
    logits, c = _forward(net, x, masks)
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logz - z[np.arange(n), y]))

    g = {}
    dlog = np.exp(z - logz[:, None])
    dlog[np.arange(n), y] -= 1
    dlog /= n
    g["fc3_w"] = c["h2"].T @ dlog
    g["fc3_b"] = dlog.sum(0)
    dh2 = dlog @ p["fc3_w"].T
    if masks is not None:
        dh2 = dh2 * masks[1]
    g["fc2_w"] = c["h1"].T @ dh2
    g["fc2_b"] = dh2.sum(0)
    dh1 = dh2 @ p["fc2_w"].T
    if masks is not None:
        dh1 = dh1 * masks[0]
    g["fc1_w"] = c["f0"].T @ dh1
    g["fc1_b"] = dh1.sum(0)
    df0 = dh1 @ p["fc1_w"].T

    dq2 = np.ascontiguousarray(df0.reshape(n, 8, 3, 3).transpose(1, 0, 2, 3))
    da2 = (_pool_backward(dq2, c["arg2"]) * (c["a2"] > 0)).reshape(8, -1)
    g["conv2_w"] = (da2 @ c["c2"].T).reshape(8, 4, 7, 7)
    g["conv2_b"] = da2.sum(1)
    dq1 = _col2im(p["conv2_w"].reshape(8, -1).T @ da2, c["q1_shape"], 7)
    da1 = (_pool_backward(dq1, c["arg1"]) * (c["a1"] > 0)).reshape(4, -1)
    g["conv1_w"] = (da1 @ c["c1"].T).reshape(4, 1, 5, 5)
    g["conv1_b"] = da1.sum(1)
    dt = net.dtype
    return loss, {k: v.astype(dt, copy=False) for k, v in g.items()}


# ----------------------------------------------------------------------------
# optimization

@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 0.0005
    learning_rate: float = 0.001
    iteration: int = 0

    @classmethod
    def for_network(cls, net: Network, momentum=0.9, weight_decay=0.0005,
                    learning_rate=0.001) -> "OptimizerState":
        v = {k: np.zeros_like(w) for k, w in net.params.items()}
        return cls(v, momentum, weight_decay, learning_rate)


def sgd_step(net: Network, opt: OptimizerState, grads: dict[str, np.ndarray]) -> None:
    """One momentum step, in place on ``net`` and ``opt``. Biases skip weight decay."""
    m, a, e = opt.momentum, opt.weight_decay, opt.learning_rate
    for k, w in net.params.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {w.shape}")
        v = opt.velocity[k]
        v *= m
        if not k.endswith("_b"):
            v -= a * e * w
        v -= e * g
        w += v
    opt.iteration += 1


@dataclass
class TrainConfig:
    batch_size: int = 256
    iterations: int = 1000
    flip_prob: float = 0.5
    seed: int = 0
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")


@dataclass
class TrainResult:
    net: Network
    losses: list[float] = field(default_factory=list)


def train(net: Network, patches, labels, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Momentum SGD over uniformly drawn batches with random horizontal flips."""
    x = np.asarray(patches, dtype=net.dtype)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if (y < 0).any() or (y >= net.arity).any():
        raise ValueError(f"labels must lie in [0, {net.arity})")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState.for_network(net, cfg.momentum, cfg.weight_decay, cfg.learning_rate)
    losses = []
    n = len(x)
    for _ in range(cfg.iterations):
        idx = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        xb = x[idx]
        flip = rng.random(len(idx)) < cfg.flip_prob
        xb[flip] = xb[flip, :, ::-1]
        masks = dropout_masks(len(idx), rng, net.dtype)
        loss, grads = loss_and_grad(net, xb, y[idx], masks)
        sgd_step(net, opt, grads)
        losses.append(loss)
    return TrainResult(net, losses)


def predict(net: Network, patches) -> np.ndarray:
    return np.argmax(forward(net, np.asarray(patches)), axis=-1)


# ----------------------------------------------------------------------------
# persistence

def save_model(net: Network, path: str | os.PathLike) -> None:
    modelio.write_tensors(path, net.arity, [net.params[k] for k in PARAM_ORDER])


def load_model(path: str | os.PathLike) -> Network:
    arity, tensors = modelio.read_tensors(path)
    if len(tensors) != len(PARAM_ORDER):
        raise modelio.ModelFormatError(f"{path}: expected {len(PARAM_ORDER)} tensors, got {len(tensors)}")
    shapes = param_shapes(arity)
    params = {}
    for k, t in zip(PARAM_ORDER, tensors):
        if t.shape != shapes[k]:
            raise modelio.ModelFormatError(f"{path}: tensor {k} has shape {t.shape}, expected {shapes[k]}")
        params[k] = t
    return Network(arity, params)
