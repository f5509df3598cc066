"""Per-pixel Gaussian-mixture background subtraction and the mini motion map
used to skip detector windows that contain no motion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .imaging import Frame


@dataclass
class GmmState:
    """Per-pixel mixtures, components kept sorted by weight/sigma descending."""
    weight: np.ndarray   # (H, W, K) float32
    mean: np.ndarray     # (H, W, K) float32
    var: np.ndarray      # (H, W, K) float32
    learning_rate: float = 0.005
    background_ratio: float = 0.7
    match_threshold: float = 2.5
    init_var: float = 15.0 ** 2
    min_var: float = 10.0 ** 2
    frames_seen: int = 0
    sd: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.sd is None:
            self.sd = np.sqrt(self.var).astype(np.float32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape[:2]

    @property
    def k(self) -> int:
        return self.weight.shape[2]


def init_gmm(first: Frame | np.ndarray, k: int = 4, learning_rate: float = 0.005,
             background_ratio: float = 0.7, match_threshold: float = 2.5,
             init_var: float = 15.0 ** 2, min_var: float = 10.0 ** 2) -> GmmState:
    """Seed the top component of every pixel from ``first`` with weight 1."""
    px = first.pixels if isinstance(first, Frame) else np.asarray(first)
    h, w = px.shape
    weight = np.zeros((h, w, k), np.float32)
    mean = np.zeros((h, w, k), np.float32)
    var = np.full((h, w, k), init_var, np.float32)
    weight[..., 0] = 1.0
    mean[..., 0] = px
    return GmmState(weight, mean, var, learning_rate, background_ratio,
                    match_threshold, init_var, min_var, frames_seen=1)


@numba.njit(cache=True, nogil=True)
def _gmm_update(px, weight, mean, var, sd, lr, bg_ratio, thr, init_var, min_var, mask):
    n, k = weight.shape
    for p in range(n):
        v = np.float32(px[p])
        # background components: shortest prefix whose weight exceeds bg_ratio
        n_bg = k
        acc = np.float32(0.0)
        for c in range(k):
            acc += weight[p, c]
            if acc > bg_ratio:
                n_bg = c + 1
                break
        hit = -1
        for c in range(k):
            if weight[p, c] > 0.0:
                d = v - mean[p, c]
                if abs(d) < thr * sd[p, c]:
                    hit = c
                    break
        mask[p] = 0 if (hit >= 0 and hit < n_bg) else 255
        for c in range(k):
            weight[p, c] *= np.float32(1.0) - lr
        if hit >= 0:
            weight[p, hit] += lr
            rho = min(lr / weight[p, hit], np.float32(1.0))
            d = v - mean[p, hit]
            mean[p, hit] += rho * d
            nv = max(var[p, hit] + rho * (d * d - var[p, hit]), min_var)
            var[p, hit] = nv
            sd[p, hit] = np.sqrt(nv)
            moved = hit
        else:
            moved = k - 1
            weight[p, moved] = lr
            mean[p, moved] = v
            var[p, moved] = init_var
            sd[p, moved] = np.sqrt(init_var)
        total = np.float32(0.0)
        for c in range(k):
            total += weight[p, c]
        inv = np.float32(1.0) / total
        for c in range(k):
            weight[p, c] *= inv
        # only `moved` changed its weight/sigma rank; bubble it into place
        j = moved
        key = weight[p, j] / sd[p, j]
        while j > 0 and key > weight[p, j - 1] / sd[p, j - 1]:
            _swap(weight, mean, var, sd, p, j, j - 1)
            j -= 1
        while j < k - 1 and key < weight[p, j + 1] / sd[p, j + 1]:
            _swap(weight, mean, var, sd, p, j, j + 1)
            j += 1


@numba.njit(inline="always")
def _swap(weight, mean, var, sd, p, a, b):
    weight[p, a], weight[p, b] = weight[p, b], weight[p, a]
    mean[p, a], mean[p, b] = mean[p, b], mean[p, a]
    var[p, a], var[p, b] = var[p, b], var[p, a]
    sd[p, a], sd[p, b] = sd[p, b], sd[p, a]


@numba.njit(cache=True, nogil=True)
def _background(weight, mean, bg_ratio, out):
    h, w, k = weight.shape
    for y in range(h):
        for x in range(w):
            best = 0
            acc = 0.0
            for c in range(k):
                if weight[y, x, c] > weight[y, x, best]:
                    best = c
                acc += weight[y, x, c]
                if acc > bg_ratio:
                    break
            m = mean[y, x, best] + 0.5
            out[y, x] = 0 if m < 0 else (255 if m > 255 else np.uint8(m))


def gmm_step(state: GmmState, frame: Frame | np.ndarray) -> Frame:
    """Classify ``frame`` against the mixtures, then update them. Returns a 0/255 mask."""
    px = frame.pixels if isinstance(frame, Frame) else np.asarray(frame, np.uint8)
    if px.shape != state.shape:
        raise ValueError(f"frame shape {px.shape} does not match GMM state {state.shape}")
    mask = np.empty(px.shape, np.uint8)
    k = state.k
    _gmm_update(px.reshape(-1), state.weight.reshape(-1, k), state.mean.reshape(-1, k),
                state.var.reshape(-1, k), state.sd.reshape(-1, k), np.float32(state.learning_rate),
                np.float32(state.background_ratio), np.float32(state.match_threshold),
                np.float32(state.init_var), np.float32(state.min_var), mask.reshape(-1))
    state.frames_seen += 1
    return Frame(mask, frame.t if isinstance(frame, Frame) else state.frames_seen - 1)


def background_image(state: GmmState) -> Frame:
    """Mean of the heaviest background component per pixel, rounded to 8 bits."""
    out = np.empty(state.shape, np.uint8)
    _background(state.weight, state.mean, np.float32(state.background_ratio), out)
    return Frame(out, max(state.frames_seen - 1, 0))


@dataclass(frozen=True)
class MiniMotionMap:
    cells: np.ndarray              # (rows, cols) bool
    window: tuple[int, int]        # (w, h)
    stride: tuple[int, int]        # (sx, sy)

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    def positions(self) -> np.ndarray:
        """Top-left pixel coordinates ``(x, y)`` of every active window."""
        r, c = np.nonzero(self.cells)
        return np.stack([c * self.stride[0], r * self.stride[1]], axis=1)


def minimap_shape(frame_size: tuple[int, int], window=(64, 128), stride=(8, 8)) -> tuple[int, int]:
    """``(cols, rows)``: window positions per axis, one per stride step, fencepost included."""
    (fw, fh), (ww, wh), (sx, sy) = frame_size, window, stride
    return (fw - ww) // sx + 1, (fh - wh) // sy + 1


def mini_motion_map(mask: Frame | np.ndarray, window=(64, 128), stride=(8, 8),
                    min_fg_pixels: int = 16) -> MiniMotionMap:
    m = mask.pixels if isinstance(mask, Frame) else np.asarray(mask)
    fh, fw = m.shape
    ww, wh = window
    sx, sy = stride
    if ww > fw or wh > fh:
        raise ValueError(f"window {window} larger than frame {fw}x{fh}")
    cols, rows = minimap_shape((fw, fh), window, stride)
    ii = np.zeros((fh + 1, fw + 1), np.int32)
    ii[1:, 1:] = (m > 0).cumsum(0, dtype=np.int32).cumsum(1, dtype=np.int32)
    ys = np.arange(rows) * sy
    xs = np.arange(cols) * sx
    counts = (ii[np.ix_(ys + wh, xs + ww)] - ii[np.ix_(ys, xs + ww)]
              - ii[np.ix_(ys + wh, xs)] + ii[np.ix_(ys, xs)])
    return MiniMotionMap(counts >= min_fg_pixels, (ww, wh), (sx, sy))
