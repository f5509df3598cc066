"""Finite-difference oracle for the CNN gradients (shared by the unit and
acceptance tests).

Every component of every parameter tensor is perturbed by +-h and the loss
re-evaluated in float64 with fixed dropout masks. Layers are re-run only
from the perturbed layer onwards; for the fully connected layers the
perturbed logits follow from linearity (a change of one weight shifts the
logits by a known rank-one term), which lets one row of perturbations be
evaluated in a single vectorized call.
"""

import numpy as np

from subact import cnn


def _loss(z, y):
    """Mean cross-entropy of logits ``z`` (..., n, a)."""
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = z[..., np.arange(len(y)), y]
    return (lse - picked).mean(axis=-1)


def _tail(p, f0, masks):
    h1 = (f0 @ p["fc1_w"] + p["fc1_b"]) * masks[0]
    h2 = (h1 @ p["fc2_w"] + p["fc2_b"]) * masks[1]
    return h1, h2, h2 @ p["fc3_w"] + p["fc3_b"]


def _conv_to_f0(p, x=None, q1=None, pattern=None):
    """Conv stack output; ``pattern`` collects the ReLU signs and pool argmaxes."""
    if q1 is None:
        n = len(x)
        a1 = p["conv1_w"].reshape(4, -1) @ cnn._im2col(x[None], 5) + p["conv1_b"][:, None]
        a1 = a1.reshape(4, n, 24, 24)
        q1, arg1 = cnn._pool_forward(np.maximum(a1, 0))
        if pattern is not None:
            pattern += [a1 > 0, arg1]
    n = q1.shape[1]
    a2 = (p["conv2_w"].reshape(8, -1) @ cnn._im2col(q1, 7) + p["conv2_b"][:, None]).reshape(8, n, 6, 6)
    q2, arg2 = cnn._pool_forward(np.maximum(a2, 0))
    if pattern is not None:
        pattern += [a2 > 0, arg2]
    return q1, np.ascontiguousarray(q2.transpose(1, 0, 2, 3)).reshape(n, 72)


def _same(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def _numeric(p, x, y, masks, h):
    out = {}
    base = []
    q1, f0 = _conv_to_f0(p, x, pattern=base)
    h1, h2, z = _tail(p, f0, masks)
    m1, m2 = masks
    w2, w3 = p["fc2_w"], p["fc3_w"]

    def central(shift):                    # shift: (..., n, a) logit change per unit h
        return (_loss(z + h * shift, y) - _loss(z - h * shift, y)) / (2 * h)

    a = z.shape[1]
    eye = np.eye(a)
    # fc3: w[i, j] moves logit j by h2[:, i]
    out["fc3_w"] = central(h2.T[:, None, :, None] * eye[None, :, None, :])
    out["fc3_b"] = central(np.broadcast_to(eye[:, None, :], (a, len(y), a)))
    # fc2: w[i, j] moves h2[:, j] by h1[:, i] * m2[:, j]
    g2 = np.empty_like(w2)
    base2 = m2.T[:, :, None] * w3[:, None, :]                       # (j, n, a)
    for i in range(w2.shape[0]):
        g2[i] = central(h1[:, i][None, :, None] * base2)
    out["fc2_w"] = g2
    out["fc2_b"] = central(base2)
    # fc1: w[i, j] moves h1[:, j] by f0[:, i] * m1[:, j]
    base1 = np.einsum("nj,jk,nk,ka->jna", m1, w2, m2, w3)
    g1 = np.empty_like(p["fc1_w"])
    for i in range(g1.shape[0]):
        g1[i] = central(f0[:, i][None, :, None] * base1)
    out["fc1_w"] = g1
    out["fc1_b"] = central(base1)
    # convolutions: rerun from the perturbed layer. A step that flips a ReLU
    # or a pooling argmax straddles a kink, where the loss is not
    # differentiable; such components are retried with a smaller step.
    for name, from_input in (("conv1_w", True), ("conv1_b", True), ("conv2_w", False), ("conv2_b", False)):
        w = p[name]
        ref_pattern = base if from_input else base[2:]
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            step = h
            for _ in range(4):
                vals, smooth = [], True
                for s in (step, -step):
                    w[idx] = old + s
                    pat = []
                    f = _conv_to_f0(p, x, pattern=pat)[1] if from_input else _conv_to_f0(p, q1=q1, pattern=pat)[1]
                    smooth &= _same(pat, ref_pattern)
                    vals.append(_loss(_tail(p, f, masks)[2], y))
                w[idx] = old
                if smooth:
                    break
                step /= 100
            g[idx] = (vals[0] - vals[1]) / (2 * step)
        out[name] = g
    return out


def gradient_check(arity: int, seed: int = 0, batch: int = 8, dtype=np.float32,
                   h: float = 1e-5) -> dict[str, float]:
    """Per-tensor relative error max|analytic - numeric| / max|numeric|.

    Analytic gradients are computed at ``dtype``; the numeric reference is a
    float64 central difference over every component of every tensor.
    """
    rng = np.random.default_rng(seed)
    net = cnn.init_network(arity, seed=seed, dtype=dtype)
    x = rng.normal(0, 40, (batch, 28, 28)).astype(dtype)
    y = rng.integers(0, arity, batch)
    masks = cnn.dropout_masks(batch, rng, np.float64)
    _, analytic = cnn.loss_and_grad(net, x, y, tuple(m.astype(dtype) for m in masks))
    ref = net.astype(np.float64)
    numeric = _numeric(ref.params, x.astype(np.float64), y, masks, h)
    errs = {}
    for name in cnn.PARAM_ORDER:
        scale = np.abs(numeric[name]).max()
        diff = np.abs(analytic[name] - numeric[name]).max()
        errs[name] = float(diff / scale) if scale > 0 else float(diff)
    return errs
