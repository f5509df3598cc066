"""HOG + linear SVM person detector over motion-gated sliding windows, and an
oracle detector that replays annotated boxes.

The HOG layout follows the Dalal-Triggs pedestrian setup: 64x128 window,
8x8 cells, 9 unsigned orientation bins, 2x2-cell blocks at one-cell stride,
L2-Hys normalisation. Gradient and binning conventions match
``skimage.feature.hog`` so it can serve as a reference.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import cv2
import numba
import numpy as np

from . import modelio
from .evaluation import iou
from .imaging import AnnotationRecord, BoundingBox, Frame
from .motion_saliency import MiniMotionMap, minimap_shape

WINDOW = (64, 128)          # (w, h)
CELL = 8
BLOCK = 2
BINS = 9
BLOCKS_X = WINDOW[0] // CELL - BLOCK + 1   # 7
BLOCKS_Y = WINDOW[1] // CELL - BLOCK + 1   # 15
BLOCK_LEN = BLOCK * BLOCK * BINS           # 36
HOG_LENGTH = BLOCKS_X * BLOCKS_Y * BLOCK_LEN
# person box inside a detection window, per side, at scale 1
WINDOW_MARGIN = 16
L2HYS_CLIP = 0.2
L2HYS_EPS = 1e-5


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float


@dataclass
class SvmModel:
    weights: np.ndarray
    bias: float
    C: float = 100.0
    train_accuracy: float | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, np.float64).ravel()
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise ValueError("SVM weights must be finite")
        if not self.C > 0:
            raise ValueError(f"C must be positive, got {self.C}")

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, np.float64) @ self.weights + self.bias


# ---------------------------------------------------------------- HOG

def _orientation_bin(ori: np.ndarray, nbins: int) -> np.ndarray:
    """Bin index of orientations in [0, 180): half-open [w*b, w*(b+1)); -1 if none."""
    width = 180.0 / nbins
    b = np.floor(ori / width).astype(np.int64)
    b[(b > 0) & (ori < width * b)] -= 1
    b[ori >= width * (b + 1)] += 1
    b[(b < 0) | (b >= nbins)] = -1
    return b


def _gradient_tables(nbins: int = BINS) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude and bin for every integer gradient pair of an 8-bit image,
    indexed [g_row + 255, g_col + 255]."""
    g = np.arange(-255, 256, dtype=np.float64)
    g_row, g_col = np.meshgrid(g, g, indexing="ij")
    mag = np.hypot(g_col, g_row)
    ori = np.rad2deg(np.arctan2(g_row, g_col)) % 180
    return mag, _orientation_bin(ori, nbins).astype(np.int8)


_MAG_LUT, _BIN_LUT = _gradient_tables()


@numba.njit(cache=True, nogil=True)
def _cell_histograms(g_row, g_col, mag_lut, bin_lut, offset, cy0, cy1, cx0, cx1, cell, nbins):
    """Histograms of cells [cy0, cy1) x [cx0, cx1); gradients are looked up by
    their (offset-shifted) integer value."""
    # single-precision accumulation, as in the skimage reference kernel
    acc = np.zeros((cy1 - cy0, cx1 - cx0, nbins), np.float32)
    for cy in range(cy0, cy1):
        for cx in range(cx0, cx1):
            for y in range(cy * cell, (cy + 1) * cell):
                for x in range(cx * cell, (cx + 1) * cell):
                    i = g_row[y, x] + offset
                    j = g_col[y, x] + offset
                    b = bin_lut[i, j]
                    if b >= 0:
                        acc[cy - cy0, cx - cx0, b] = np.float32(
                            np.float64(acc[cy - cy0, cx - cx0, b]) + mag_lut[i, j])
    return (acc / np.float32(cell * cell)).astype(np.float64)


@numba.njit(cache=True, nogil=True)
def _dense_cell_histograms(mag, bins, cell, nbins):
    n_cy, n_cx = mag.shape[0] // cell, mag.shape[1] // cell
    acc = np.zeros((n_cy, n_cx, nbins), np.float32)
    for cy in range(n_cy):
        for cx in range(n_cx):
            for y in range(cy * cell, (cy + 1) * cell):
                for x in range(cx * cell, (cx + 1) * cell):
                    b = bins[y, x]
                    if b >= 0:
                        acc[cy, cx, b] = np.float32(np.float64(acc[cy, cx, b]) + mag[y, x])
    return (acc / np.float32(cell * cell)).astype(np.float64)


def _int_gradients(img: np.ndarray, rows: slice, cols: slice):
    """Central differences (zero on the image border) over a pixel window."""
    h, w = img.shape
    y0, y1 = rows.start, rows.stop
    x0, x1 = cols.start, cols.stop
    src = img.astype(np.int32)
    g_row = np.zeros((h, w), np.int32)
    g_col = np.zeros((h, w), np.int32)
    ya, yb = max(y0, 1), min(y1, h - 1)
    xa, xb = max(x0, 1), min(x1, w - 1)
    g_row[ya:yb, x0:x1] = src[ya + 1:yb + 1, x0:x1] - src[ya - 1:yb - 1, x0:x1]
    g_col[y0:y1, xa:xb] = src[y0:y1, xa + 1:xb + 1] - src[y0:y1, xa - 1:xb - 1]
    return g_row, g_col


def cell_histograms(img: np.ndarray, rows: tuple[int, int] | None = None,
                    cols: tuple[int, int] | None = None) -> np.ndarray:
    """Orientation histograms of 8x8 cells, shape (n_rows, n_cols, 9).

    ``rows``/``cols`` restrict the computation to a half-open range of cell
    indices; gradients still see the whole image.
    """
    img = np.asarray(img)
    r0, r1 = rows if rows is not None else (0, img.shape[0] // CELL)
    c0, c1 = cols if cols is not None else (0, img.shape[1] // CELL)
    ys, xs = slice(r0 * CELL, r1 * CELL), slice(c0 * CELL, c1 * CELL)
    if img.dtype == np.uint8:
        g_row, g_col = _int_gradients(img, ys, xs)
        return _cell_histograms(g_row, g_col, _MAG_LUT, _BIN_LUT, 255, r0, r1, c0, c1, CELL, BINS)
    # general intensities: same arithmetic without the lookup table
    f = img.astype(np.float64)
    g_row = np.zeros_like(f)
    g_col = np.zeros_like(f)
    g_row[1:-1, :] = f[2:, :] - f[:-2, :]
    g_col[:, 1:-1] = f[:, 2:] - f[:, :-2]
    sub = (ys, xs)
    mag = np.hypot(g_col[sub], g_row[sub])
    bins = _orientation_bin(np.rad2deg(np.arctan2(g_row[sub], g_col[sub])) % 180, BINS)
    return _dense_cell_histograms(mag, bins, CELL, BINS)


def normalized_blocks(cells: np.ndarray) -> np.ndarray:
    """(rows - 1, cols - 1, 2, 2, 9) L2-Hys normalised blocks at one-cell stride."""
    r, c, _ = cells.shape
    blocks = np.empty((r - 1, c - 1, BLOCK, BLOCK, BINS))
    for i in range(BLOCK):
        for j in range(BLOCK):
            blocks[:, :, i, j] = cells[i:r - 1 + i, j:c - 1 + j]
    eps2 = L2HYS_EPS ** 2
    norm = np.sqrt((blocks ** 2).sum(axis=(2, 3, 4), keepdims=True) + eps2)
    out = np.minimum(blocks / norm, L2HYS_CLIP)
    return out / np.sqrt((out ** 2).sum(axis=(2, 3, 4), keepdims=True) + eps2)


def hog_descriptor(patch) -> np.ndarray:
    """3780-long HOG vector of a 64 wide by 128 tall window."""
    px = patch.pixels if isinstance(patch, Frame) else np.asarray(patch)
    if px.shape != (WINDOW[1], WINDOW[0]):
        raise ValueError(f"HOG window must be {WINDOW[0]}x{WINDOW[1]} (w x h), got shape {px.shape}")
    return normalized_blocks(cell_histograms(px)).ravel()


# ---------------------------------------------------------------- SVM

@numba.njit(cache=True, nogil=True)
def _dual_cd(x, y, c, order, max_epochs, tol):
    n, d = x.shape
    w = np.zeros(d)
    alpha = np.zeros(n)
    qii = np.empty(n)
    for i in range(n):
        qii[i] = np.dot(x[i], x[i])
    for epoch in range(max_epochs):
        pg_max, pg_min = -np.inf, np.inf
        for i in order[epoch]:
            g = y[i] * np.dot(w, x[i]) - 1.0
            if alpha[i] == 0.0:
                pg = min(g, 0.0)
            elif alpha[i] == c:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if pg != 0.0:
                old = alpha[i]
                alpha[i] = min(max(old - g / qii[i], 0.0), c)
                w += (alpha[i] - old) * y[i] * x[i]
        if pg_max - pg_min < tol:
            break
    return w


def train_svm(positives, negatives, C: float = 100.0, seed: int = 0,
              max_epochs: int = 2000, tol: float = 1e-4) -> SvmModel:
    """Linear hinge-loss SVM by dual coordinate descent; the bias is learned
    as the weight of a constant feature."""
    pos = np.atleast_2d(np.asarray(positives, np.float64))
    neg = np.atleast_2d(np.asarray(negatives, np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative example")
    if pos.shape[1] != neg.shape[1]:
        raise ValueError("positive and negative features differ in length")
    if not C > 0:
        raise ValueError(f"C must be positive, got {C}")
    x = np.vstack([pos, neg])
    if np.all(x == x[0]):
        raise ValueError("degenerate training set: all feature vectors are identical")
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    xa = np.hstack([x, np.ones((len(x), 1))])
    rng = np.random.default_rng(seed)
    order = np.stack([rng.permutation(len(x)) for _ in range(max_epochs)])
    w = _dual_cd(xa, y, float(C), order, max_epochs, tol)
    model = SvmModel(w[:-1], float(w[-1]), C)
    model.train_accuracy = float(np.mean(np.sign(model.decision(x)) == y))
    return model


def save_svm(model: SvmModel, path: str | os.PathLike) -> None:
    modelio.write_tensors(path, 2, [model.weights, np.array([model.bias]), np.array([model.C])])


def load_svm(path: str | os.PathLike) -> SvmModel:
    arity, tensors = modelio.read_tensors(path)
    if arity != 2 or len(tensors) != 3 or tensors[1].shape != (1,) or tensors[2].shape != (1,):
        raise modelio.ModelFormatError(f"{path}: not an SVM model file")
    return SvmModel(tensors[0].astype(np.float64), float(tensors[1][0]), float(tensors[2][0]))


# ---------------------------------------------------------------- detection

def nms(dets: Sequence[Detection], iou_thr: float = 0.45) -> list[Detection]:
    """Greedy suppression in descending score order."""
    keep: list[Detection] = []
    for d in sorted(dets, key=lambda d: -d.score):
        if all(iou(d.box, k.box) <= iou_thr for k in keep):
            keep.append(d)
    return keep


def window_scores(img: np.ndarray, model: SvmModel, rows: tuple[int, int] | None = None,
                  cols: tuple[int, int] | None = None) -> np.ndarray:
    """SVM score of cell-aligned windows. Window (r, c) has its top-left at
    pixel (8c, 8r); ``rows``/``cols`` restrict r and c to half-open ranges
    (default: every window that fits)."""
    n_r = img.shape[0] // CELL - (BLOCKS_Y + BLOCK - 1) + 1
    n_c = img.shape[1] // CELL - (BLOCKS_X + BLOCK - 1) + 1
    r0, r1 = rows if rows is not None else (0, n_r)
    c0, c1 = cols if cols is not None else (0, n_c)
    if r1 <= r0 or c1 <= c0:
        return np.zeros((max(r1 - r0, 0), max(c1 - c0, 0)))
    cells = cell_histograms(img, (r0, r1 + BLOCKS_Y), (c0, c1 + BLOCKS_X))
    blocks = normalized_blocks(cells)
    nbr, nbc = blocks.shape[:2]
    n_rows, n_cols = r1 - r0, c1 - c0
    # partial dot of every block against every block slot of the template
    partial = blocks.reshape(nbr, nbc, BLOCK_LEN) @ model.weights.reshape(-1, BLOCK_LEN).T
    out = np.full((n_rows, n_cols), model.bias)
    for i in range(BLOCKS_Y):
        for j in range(BLOCKS_X):
            out += partial[i:i + n_rows, j:j + n_cols, i * BLOCKS_X + j]
    return out


def _gate(mm: MiniMotionMap, rows: int, cols: int, scale: float) -> np.ndarray:
    """Scaled windows whose footprint contains at least one active base window."""
    cells = mm.cells.astype(np.int32)
    ii = np.zeros((cells.shape[0] + 1, cells.shape[1] + 1), np.int32)
    ii[1:, 1:] = cells.cumsum(0).cumsum(1)
    (ww, wh), (sx, sy) = mm.window, mm.stride
    out = np.zeros((rows, cols), bool)
    xs = np.arange(cols) * CELL * scale
    ys = np.arange(rows) * CELL * scale
    c0 = np.clip(np.ceil(xs / sx - 1e-9).astype(int), 0, mm.cols)
    c1 = np.clip(np.floor((xs + WINDOW[0] * scale - ww) / sx + 1e-9).astype(int) + 1, 0, mm.cols)
    r0 = np.clip(np.ceil(ys / sy - 1e-9).astype(int), 0, mm.rows)
    r1 = np.clip(np.floor((ys + WINDOW[1] * scale - wh) / sy + 1e-9).astype(int) + 1, 0, mm.rows)
    c1 = np.maximum(c1, c0)
    r1 = np.maximum(r1, r0)
    out = (ii[np.ix_(r1, c1)] - ii[np.ix_(r0, c1)] - ii[np.ix_(r1, c0)] + ii[np.ix_(r0, c0)]) > 0
    return out


def refine_box(box: BoundingBox, window: BoundingBox, mask: np.ndarray,
               min_pixels: int = 64, min_line: int = 2) -> BoundingBox:
    """Tighten ``box`` to the foreground inside its detection ``window``.

    Rows/columns with fewer than ``min_line`` foreground pixels are ignored
    so isolated noise does not stretch the box; too little foreground leaves
    ``box`` unchanged.
    """
    x0, y0 = int(window.x), int(window.y)
    x1, y1 = int(np.ceil(window.x2)), int(np.ceil(window.y2))
    fg = mask[y0:y1, x0:x1] > 0
    if fg.sum() < min_pixels:
        return box
    ys = np.nonzero(fg.sum(1) >= min_line)[0]
    xs = np.nonzero(fg.sum(0) >= min_line)[0]
    if len(ys) == 0 or len(xs) == 0:
        return box
    return BoundingBox(x0 + int(xs[0]), y0 + int(ys[0]), int(xs[-1] - xs[0]) + 1, int(ys[-1] - ys[0]) + 1)


def detect(frame, minimap: MiniMotionMap, model: SvmModel, scales=(1.0, 1.2, 1.44),
           threshold: float = 0.0, nms_iou: float = 0.45, mask=None) -> list[Detection]:
    """Score motion-gated windows over a scale pyramid, threshold, then NMS.

    Without ``mask`` a detection's box is the fixed person area of its
    window. With a foreground ``mask`` the box is tightened to the
    foreground inside the window before suppression.
    """
    px = frame.pixels if isinstance(frame, Frame) else np.asarray(frame)
    fh, fw = px.shape
    if mask is not None:
        mask = mask.pixels if isinstance(mask, Frame) else np.asarray(mask)
        if mask.shape != px.shape:
            raise ValueError("foreground mask does not match the frame")
    if minimap_shape((fw, fh), minimap.window, minimap.stride) != (minimap.cols, minimap.rows):
        raise ValueError("mini motion map geometry does not match the frame")
    if not minimap.cells.any():
        return []
    cands = []
    for s in scales:
        sw, sh = int(round(fw / s)), int(round(fh / s))
        if sw < WINDOW[0] or sh < WINDOW[1]:
            continue
        img = px if s == 1 else cv2.resize(px, (sw, sh), interpolation=cv2.INTER_AREA)
        # exact frame-to-scaled ratio, so boxes map back consistently
        kx, ky = fw / sw, fh / sh
        n_r = sh // CELL - WINDOW[1] // CELL + 1
        n_c = sw // CELL - WINDOW[0] // CELL + 1
        if n_r <= 0 or n_c <= 0:
            continue
        gate = _gate(minimap, n_r, n_c, s)
        rr, cc = np.nonzero(gate)
        if len(rr) == 0:
            continue
        r0, c0 = rr.min(), cc.min()
        scores = window_scores(img, model, (r0, rr.max() + 1), (c0, cc.max() + 1))
        keep = scores[rr - r0, cc - c0] > threshold
        for r, c in zip(rr[keep], cc[keep]):
            score = scores[r - r0, c - c0]
            x = (c * CELL + WINDOW_MARGIN) * kx
            y = (r * CELL + WINDOW_MARGIN) * ky
            box = BoundingBox(x, y, (WINDOW[0] - 2 * WINDOW_MARGIN) * kx,
                              (WINDOW[1] - 2 * WINDOW_MARGIN) * ky).clip(fw, fh)
            if box is not None and mask is not None:
                win = BoundingBox(c * CELL * kx, r * CELL * ky, WINDOW[0] * kx, WINDOW[1] * ky).clip(fw, fh)
                box = refine_box(box, win, mask)
            if box is not None:
                cands.append(Detection(box, float(score)))
    return nms(cands, nms_iou)


def oracle_detect(annotations: Iterable[AnnotationRecord], frame_index: int) -> list[Detection]:
    return [Detection(r.box, 1.0) for r in annotations if r.frame == frame_index]


# ---------------------------------------------------------------- training data

def window_for_box(box: BoundingBox, scale: float | None = None) -> tuple[float, float, float]:
    """Window origin and scale that place ``box`` on the person area of a window."""
    if scale is None:
        # height sets the scale; wide figures may spill into the side margins
        inner_h = WINDOW[1] - 2 * WINDOW_MARGIN
        scale = max(box.h / inner_h, box.w / (WINDOW[0] - CELL), 1.0)
    cx, cy = box.center
    return cx - WINDOW[0] * scale / 2, cy - WINDOW[1] * scale / 2, scale


def extract_window(img: np.ndarray, x: float, y: float, scale: float = 1.0) -> np.ndarray | None:
    """64x128 window resampled from a ``scale``-sized region at (x, y); None if it leaves the image."""
    w, h = WINDOW[0] * scale, WINDOW[1] * scale
    x0, y0 = int(round(x)), int(round(y))
    x1, y1 = int(round(x + w)), int(round(y + h))
    if x0 < 0 or y0 < 0 or x1 > img.shape[1] or y1 > img.shape[0]:
        return None
    roi = img[y0:y1, x0:x1]
    if roi.shape != (WINDOW[1], WINDOW[0]):
        roi = cv2.resize(roi, WINDOW, interpolation=cv2.INTER_AREA)
    return roi


def training_windows(frames: Sequence[np.ndarray], boxes: Sequence[Sequence[BoundingBox]],
                     rng: np.random.Generator, negatives_per_frame: int = 4,
                     min_offset: int = 14) -> tuple[np.ndarray, np.ndarray]:
    """HOG sets for detector training.

    Positives are windows centred on each annotated person (plus mirror
    images). Negatives are random background windows plus near misses,
    windows shifted sideways by one to two times ``min_offset`` (or half the
    person width, if larger), so
    that off-centre windows learn to score low and NMS sees one peak.
    """
    pos, neg = [], []

    def off_person(x, y, s, bxs):
        cx, cy = x + WINDOW[0] * s / 2, y + WINDOW[1] * s / 2
        return all(abs(cx - b.center[0]) >= max(min_offset * s, b.w / 2)
                   or abs(cy - b.center[1]) >= max(2 * min_offset * s, b.h / 3) for b in bxs)

    for img, bxs in zip(frames, boxes):
        img = np.asarray(img)
        for b in bxs:
            x, y, s = window_for_box(b)
            win = extract_window(img, x, y, s)
            if win is not None:
                pos.append(hog_descriptor(win))
                pos.append(hog_descriptor(win[:, ::-1]))
            for _ in range(2):
                near = max(min_offset * s, b.w / 2)
                dx = rng.uniform(near, 2 * near) * rng.choice([-1, 1])
                dy = rng.uniform(-min_offset, min_offset)
                if off_person(x + dx, y + dy, s, bxs):
                    win = extract_window(img, x + dx, y + dy, s)
                    if win is not None:
                        neg.append(hog_descriptor(win))
        tries = got = 0
        while got < negatives_per_frame and tries < 50 * negatives_per_frame:
            tries += 1
            s = float(rng.choice([1.0, 1.2, 1.44]))
            x = rng.uniform(0, img.shape[1] - WINDOW[0] * s)
            y = rng.uniform(0, img.shape[0] - WINDOW[1] * s)
            if not off_person(x, y, s, bxs):
                continue
            win = extract_window(img, x, y, s)
            if win is not None:
                neg.append(hog_descriptor(win))
                got += 1
    return np.array(pos).reshape(-1, HOG_LENGTH), np.array(neg).reshape(-1, HOG_LENGTH)
