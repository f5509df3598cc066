"""Synthetic surveillance scenes with scripted actors and exact ground truth.

Each actor is a flat-shaded figure over a static textured background. Posture
sets the silhouette (upright vs seated), speed sets the locomotion label, and
the gesture is a small patch inside the figure blinking with a fixed period
at a fixed body location.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .imaging import AnnotationRecord, BoundingBox, FrameSequence

# px/frame boundaries between stationary | walking | running
WALK_SPEED = 0.5
RUN_SPEED = 3.0

DEFAULT_SPEED = {"stationary": 0.0, "walking": 2.0, "running": 5.0}

# gesture -> (blink period in frames, patch centre as fraction of figure w/h)
GESTURES = {
    "nothing": None,
    "texting": (2, (0.5, 0.45)),
    "smoking": (8, (0.5, 0.12)),
    "others": (4, (0.5, 0.80)),
}


def locomotion_for_speed(speed: float) -> str:
    if speed <= WALK_SPEED:
        return "stationary"
    if speed <= RUN_SPEED:
        return "walking"
    return "running"


@dataclass
class ActorScript:
    x: float                      # top-left of the figure at frame `enter`
    y: float
    posture: str = "standing"
    gesture: str = "nothing"
    velocity: tuple[float, float] = (0.0, 0.0)
    lane: tuple[float, float] | None = None   # horizontal bounce limits, default frame
    enter: int = 0
    shade: int = 40
    scale: float = 1.0

    @property
    def locomotion(self) -> str:
        return locomotion_for_speed(float(np.hypot(*self.velocity)))

    @property
    def size(self) -> tuple[int, int]:
        w, h = (28, 96) if self.posture == "standing" else (44, 72)
        return int(round(w * self.scale)), int(round(h * self.scale))


@dataclass
class SynthScenario:
    width: int = 640
    height: int = 320
    duration: int = 60
    noise: float = 5.0
    actors: list[ActorScript] = field(default_factory=list)
    scene_id: str = "synth"
    fps: float = 15.0


def _figure_mask(posture: str, w: int, h: int, phase: float) -> np.ndarray:
    """Boolean silhouette of size (h, w). ``phase`` swings the legs."""
    m = np.zeros((h, w), np.uint8)
    if posture == "standing":
        r = max(w // 4, 2)
        cv2.circle(m, (w // 2, r + 1), r, 1, -1)
        torso = (int(0.04 * w), int(0.18 * h), int(0.96 * w), int(0.56 * h))
        cv2.rectangle(m, torso[:2], (torso[2] - 1, torso[3] - 1), 1, -1)
        swing = int(round(0.18 * w * np.sin(phase)))
        leg_w = max(int(0.32 * w), 2)
        for cx, s in ((int(0.3 * w), swing), (int(0.7 * w), -swing)):
            top = (cx, torso[3] - 1)
            foot = (int(np.clip(cx + s, leg_w // 2, w - 1 - leg_w // 2)), h - 1)
            cv2.line(m, top, foot, 1, leg_w)
    else:
        # seated: head and torso on the left, thighs forward, shins down
        tw = int(0.55 * w)
        r = max(tw // 4, 2)
        cv2.circle(m, (tw // 2, r + 1), r, 1, -1)
        cv2.rectangle(m, (0, int(0.22 * h)), (tw - 1, int(0.66 * h) - 1), 1, -1)
        cv2.rectangle(m, (0, int(0.55 * h)), (w - 1, int(0.70 * h) - 1), 1, -1)
        cv2.rectangle(m, (int(0.72 * w), int(0.55 * h)), (w - 1, h - 1), 1, -1)
    return m.astype(bool)


def _texture(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    coarse = rng.uniform(80, 160, size=(height // 16 + 2, width // 16 + 2)).astype(np.float32)
    tex = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC)
    fine = cv2.GaussianBlur(rng.normal(0, 6, (height, width)).astype(np.float32), (0, 0), 1.5)
    return np.clip(tex + fine, 60, 180)


def _trajectory(actor: ActorScript, scn: SynthScenario) -> list[tuple[float, float, float]]:
    """Top-left position and leg phase per frame from ``actor.enter`` on."""
    w, h = actor.size
    lo, hi = actor.lane if actor.lane is not None else (0, scn.width)
    x, y = float(actor.x), float(actor.y)
    vx, vy = actor.velocity
    if not (lo <= x and x + w <= hi and 0 <= y and y + h <= scn.height):
        raise ValueError(f"actor script escapes frame: box ({x},{y},{w},{h}) "
                         f"outside lane {lo}-{hi} x 0-{scn.height}")
    out, travelled = [], 0.0
    for _ in range(actor.enter, scn.duration):
        out.append((x, y, travelled / 6.0))
        nx, ny = x + vx, y + vy
        if nx < lo or nx + w > hi:
            vx = -vx
            nx = x + vx
        if ny < 0 or ny + h > scn.height:
            vy = -vy
            ny = y + vy
        travelled += abs(nx - x) + abs(ny - y)
        x, y = nx, ny
    return out


def synth_generate(scn: SynthScenario, seed: int = 0) -> tuple[FrameSequence, list[AnnotationRecord]]:
    """Render the scenario; annotations are the exact figure bounding boxes."""
    rng = np.random.default_rng(seed)
    bg = _texture(rng, scn.width, scn.height)
    trajs = [_trajectory(a, scn) for a in scn.actors]
    frames, records = [], []
    for t in range(scn.duration):
        img = bg.copy()
        for tid, (actor, traj) in enumerate(zip(scn.actors, trajs)):
            if t < actor.enter:
                continue
            x, y, phase = traj[t - actor.enter]
            w, h = actor.size
            xi, yi = int(round(x)), int(round(y))
            m = _figure_mask(actor.posture, w, h, phase if actor.locomotion != "stationary" else 0.0)
            region = img[yi:yi + h, xi:xi + w]
            region[m] = actor.shade
            spec = GESTURES[actor.gesture]
            if spec is not None:
                period, (fx, fy) = spec
                if (t - actor.enter) % period < period // 2:
                    ps = max(int(round(8 * actor.scale)), 3)
                    cx, cy = int(fx * w), int(fy * h)
                    region[max(cy - ps // 2, 0):cy + ps // 2, max(cx - ps // 2, 0):cx + ps // 2] = 230
            ys, xs = np.nonzero(m)
            box = BoundingBox(xi + int(xs.min()), yi + int(ys.min()),
                              int(xs.max() - xs.min()) + 1, int(ys.max() - ys.min()) + 1)
            records.append(AnnotationRecord(t, tid, box, actor.posture, actor.locomotion, actor.gesture))
        if scn.noise > 0:
            img = img + rng.normal(0, scn.noise, img.shape).astype(np.float32)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    seq = FrameSequence.from_arrays(frames, scn.fps, scn.scene_id)
    return seq, records


def standard_scenarios(seed: int = 0, width: int = 640, height: int = 320, duration: int = 60,
                       noise: float = 5.0, warmup: int = 5) -> list[SynthScenario]:
    """Twelve two-actor scenes: 3 locomotion x 2 posture x 2 gesture scripts.

    Actor A carries the scripted posture; a seated actor cannot move, so the
    locomotion script then falls to actor B. The gesture script switches the
    gestures on (A texting, B smoking; a running actor instead performs the
    off-vocabulary "others" gesture) or off.
    """
    rng = np.random.default_rng(seed)
    out = []
    i = 0
    for loc in ("stationary", "walking", "running"):
        for posture in ("standing", "sitting"):
            for g in (0, 1):
                a_loc = loc if posture == "standing" else "stationary"
                b_loc = loc if posture == "sitting" else ("walking" if loc == "stationary" else "stationary")
                # a running actor cannot text or smoke; it gets the off-vocabulary gesture
                a_gest = "nothing" if g == 0 else ("others" if a_loc == "running" else "texting")
                b_gest = "nothing" if g == 0 else ("others" if b_loc == "running" else "smoking")
                half = width // 2
                actors = []
                for (lo, hi), post, lc, gest in (((0, half), posture, a_loc, a_gest),
                                                 ((half, width), "standing", b_loc, b_gest)):
                    probe = ActorScript(0, 0, post, gest)
                    w, h = probe.size
                    speed = DEFAULT_SPEED[lc]
                    direction = rng.choice([-1.0, 1.0])
                    x = rng.uniform(lo + 4, hi - w - 4)
                    y = rng.uniform(4, height - h - 4)
                    actors.append(ActorScript(x, y, post, gest, (direction * speed, 0.0),
                                              (lo, hi), warmup, int(rng.integers(20, 50))))
                out.append(SynthScenario(width, height, duration + warmup, noise, actors,
                                         f"cam{i % 4 + 1:02d}"))
                i += 1
    return out


def standard_dataset(seed: int = 0, **kw) -> list[tuple[FrameSequence, list[AnnotationRecord]]]:
    return [synth_generate(s, seed * 1000 + i)
            for i, s in enumerate(standard_scenarios(seed, **kw))]
