"""Synthetic scene generation.

Stands in for real image datasets: each scene is a noisy background with
a few planted colored rectangles, fully determined by its spec.  Used
for qualitative detection runs, pruning calibration, precision studies
and distillation training data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.35, 0.85],
        [0.90, 0.60, 0.10],
        [0.15, 0.75, 0.25],
        [0.60, 0.20, 0.75],
        [0.10, 0.75, 0.80],
        [0.80, 0.75, 0.15],
        [0.55, 0.35, 0.20],
    ]
)


def class_color(class_id: int) -> np.ndarray:
    return _PALETTE[class_id % len(_PALETTE)]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    image_size: int = 64
    num_rects: int = 3
    noise: float = 0.05
    num_classes: int = 2


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, list[dict]]:
    """Deterministic image plus the planted-rectangle ground truth.

    Returns an [S, S, 3] float array with values in [0, 1] (on the
    float32 grid) and a list of {class_id, box} records with boxes in
    normalized (cx, cy, w, h).
    """
    gen = np.random.Generator(np.random.Philox(key=spec.seed))
    s = spec.image_size
    image = 0.45 + spec.noise * gen.uniform(-1.0, 1.0, size=(s, s, 3))
    truth = []
    for _ in range(spec.num_rects):
        class_id = int(gen.integers(0, max(spec.num_classes, 1)))
        w = float(gen.uniform(0.15, 0.45))
        h = float(gen.uniform(0.15, 0.45))
        cx = float(gen.uniform(w / 2, 1.0 - w / 2))
        cy = float(gen.uniform(h / 2, 1.0 - h / 2))
        x0, x1 = int((cx - w / 2) * s), max(int((cx + w / 2) * s), int((cx - w / 2) * s) + 1)
        y0, y1 = int((cy - h / 2) * s), max(int((cy + h / 2) * s), int((cy - h / 2) * s) + 1)
        image[y0:y1, x0:x1] = class_color(class_id)
        truth.append({"class_id": class_id, "box": (cx, cy, w, h)})
    image = np.clip(image, 0.0, 1.0)
    return image.astype(np.float32).astype(np.float64), truth


def scene_images(count: int, seed: int, image_size: int = 64, num_classes: int = 2) -> list[np.ndarray]:
    """A deterministic batch of scene images (ground truth discarded)."""
    return [
        generate_scene(SceneSpec(seed=seed + i, image_size=image_size, num_classes=num_classes))[0]
        for i in range(count)
    ]


def calibration_images(count: int = 8, image_size: int = 64, seed: int = 7000) -> list[np.ndarray]:
    """Default calibration set for the pruning search."""
    return scene_images(count, seed=seed, image_size=image_size)
