"""Render one synthetic scene and save the BDI, MHI and WAI maps side by side.

    python demos/feature_maps.py out.png
"""

import sys

import cv2
import numpy as np

from subact.config import load_config
from subact.pipeline import MotionFeatures
from subact.synth import ActorScript, SynthScenario, synth_generate
from subact.temporal_features import to_uint8


def main(path: str) -> None:
    scene = SynthScenario(320, 200, 40, 5.0, [
        ActorScript(20, 60, velocity=(3.0, 0.0), lane=(0, 200)),           # walker
        ActorScript(240, 40, gesture="texting", shade=70),                   # texting bystander
    ])
    seq, _ = synth_generate(scene, seed=1)
    feats = MotionFeatures(load_config())
    for frame in seq:
        feats.update(frame)
    panels = [seq[len(seq) - 1].pixels] + [to_uint8(getattr(feats.feat, n)) for n in ("bdi", "mhi", "wai")]
    cv2.imwrite(path, np.hstack(panels))
    print(f"frame | BDI | MHI | WAI -> {path}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "feature_maps.png")
