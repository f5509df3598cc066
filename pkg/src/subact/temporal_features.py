"""Binary difference (BDI), motion history (MHI) and weighted average (WAI)
images, updated once per frame, plus cropping into 28x28 network inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np

from .imaging import BoundingBox, Frame

PATCH_SIZE = 28


def _px(f: Frame | np.ndarray) -> np.ndarray:
    return f.pixels if isinstance(f, Frame) else np.asarray(f)


def _diff(cur: np.ndarray, ref: np.ndarray, abs_diff: bool) -> np.ndarray:
    d = cur.astype(np.int16) - ref.astype(np.int16)
    return np.abs(d) if abs_diff else d


def compute_bdi(frame, background, xi_thr: float = 30, abs_diff: bool = True) -> np.ndarray:
    """255 where the frame departs from the background by more than ``xi_thr``, else 0."""
    cur, bg = _px(frame), _px(background)
    if cur.shape != bg.shape:
        raise ValueError(f"frame {cur.shape} and background {bg.shape} differ in size")
    return np.where(_diff(cur, bg, abs_diff) > xi_thr, 255.0, 0.0)


def compute_wai(bdi: np.ndarray, mhi: np.ndarray, w=(0.6, 0.4)) -> np.ndarray:
    w1, w2 = w
    if w1 < 0 or w2 < 0 or not math.isclose(w1 + w2, 1.0, abs_tol=1e-12):
        raise ValueError(f"WAI weights must be non-negative and sum to 1, got {w}")
    if bdi.shape != mhi.shape:
        raise ValueError("BDI and MHI maps differ in size")
    return w1 * bdi + w2 * mhi


@dataclass
class TemporalFeatureState:
    xi_thr: float = 30.0
    tau_max: float = 255.0
    tau_min: float = 0.0
    n: int = 25
    w: tuple[float, float] = (0.6, 0.4)
    abs_diff: bool = True
    prev_frame: np.ndarray | None = None
    background: np.ndarray | None = None
    bdi: np.ndarray | None = None
    mhi: np.ndarray | None = None
    wai: np.ndarray | None = None
    # frames since each pixel last fired, saturating at n
    age: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("history capacity n must be >= 1")
        if not self.tau_max > self.tau_min:
            raise ValueError("tau_max must exceed tau_min")
        w1, w2 = self.w
        if w1 < 0 or w2 < 0 or not math.isclose(w1 + w2, 1.0, abs_tol=1e-12):
            raise ValueError(f"WAI weights must be non-negative and sum to 1, got {self.w}")

    @property
    def delta_tau(self) -> float:
        return (self.tau_max - self.tau_min) / self.n

    def _mhi_from_age(self) -> np.ndarray:
        # tau_max - age * delta_tau, evaluated so that age == n lands exactly on tau_min
        n, span = self.n, self.tau_max - self.tau_min
        return (self.tau_max * n - self.age * span) / n


def update_mhi(state: TemporalFeatureState, frame) -> np.ndarray:
    """Advance the motion history by one frame.

    Pixels whose frame-to-frame change exceeds the threshold jump to
    ``tau_max``; all others decay by ``delta_tau`` and stop at ``tau_min``.
    """
    cur = _px(frame)
    if state.prev_frame is None:
        state.age = np.full(cur.shape, state.n, np.int32)
    else:
        if cur.shape != state.prev_frame.shape:
            raise ValueError(f"frame {cur.shape} differs from previous frame {state.prev_frame.shape}")
        fired = _diff(cur, state.prev_frame, state.abs_diff) > state.xi_thr
        np.minimum(state.age + 1, state.n, out=state.age)
        state.age[fired] = 0
    state.prev_frame = cur
    state.mhi = state._mhi_from_age()
    return state.mhi


def update_features(state: TemporalFeatureState, frame, background) -> TemporalFeatureState:
    """BDI against ``background``, MHI against the previous frame, WAI from both."""
    state.background = _px(background)
    state.bdi = compute_bdi(frame, state.background, state.xi_thr, state.abs_diff)
    update_mhi(state, frame)
    state.wai = compute_wai(state.bdi, state.mhi, state.w)
    return state


def crop_box(box: BoundingBox, shape: tuple[int, int], pad: int = 10) -> tuple[int, int, int, int]:
    """Integer ``(x1, y1, x2, y2)`` of the padded box clamped to a ``(rows, cols)`` map."""
    h, w = shape
    x1 = max(int(math.floor(box.x - pad)), 0)
    y1 = max(int(math.floor(box.y - pad)), 0)
    x2 = min(int(math.ceil(box.x + box.w + pad)), w)
    y2 = min(int(math.ceil(box.y + box.h + pad)), h)
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"box {box.as_tuple()} does not intersect the {w}x{h} map")
    return x1, y1, x2, y2


def crop_patch(feature_map: np.ndarray, box: BoundingBox, pad: int = 10,
               size: int = PATCH_SIZE) -> np.ndarray:
    """Padded crop, bilinear resize to ``size`` x ``size``, own mean removed."""
    x1, y1, x2, y2 = crop_box(box, feature_map.shape, pad)
    roi = np.ascontiguousarray(feature_map[y1:y2, x1:x2], dtype=np.float32)
    if roi.shape != (size, size):
        roi = cv2.resize(roi, (size, size), interpolation=cv2.INTER_LINEAR)
    return roi - roi.mean(dtype=np.float64).astype(np.float32)


def crop_patches(state: TemporalFeatureState, boxes, pad: int = 10) -> dict[str, np.ndarray]:
    """Stacks of BDI/MHI/WAI patches, one per box."""
    out = {}
    for name in ("bdi", "mhi", "wai"):
        m = getattr(state, name)
        if boxes:
            out[name] = np.stack([crop_patch(m, b, pad) for b in boxes])
        else:
            out[name] = np.zeros((0, PATCH_SIZE, PATCH_SIZE), np.float32)
    return out


def to_uint8(feature_map: np.ndarray) -> np.ndarray:
    """Quantize a feature map for viewing."""
    return np.clip(np.rint(feature_map), 0, 255).astype(np.uint8)
