from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from ..tensor import Tensor


def _check_box(box) -> None:
    cx, cy, w, h = box
    if not (w > 0 and h > 0):
        raise DataError(f"box {tuple(box)} has non-positive size")
    eps = 1e-9
    if cx - w / 2 < -eps or cy - h / 2 < -eps or cx + w / 2 > 1 + eps or cy + h / 2 > 1 + eps:
        raise DataError(f"box {tuple(box)} leaves the unit square")


@dataclass
class ImageSample:
    """One image with normalised (cx, cy, w, h) ground truth."""

    pixels: np.ndarray
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    labels: list = field(default_factory=list)
    image_id: int = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = list(self.labels)
        if len(self.labels) != len(self.boxes):
            raise DataError(f"image {self.image_id}: {len(self.boxes)} boxes but {len(self.labels)} labels")
        for b in self.boxes:
            _check_box(b)


@dataclass(frozen=True)
class Detection:
    box: tuple
    label: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"score {self.score} outside [0, 1]")


@dataclass
class EncodedImage:
    features: Tensor      # (grid tokens, d_model)
    global_embedding: np.ndarray  # unit vector
