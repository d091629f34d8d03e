"""Seeded synthetic continual-detection benchmark.

Each class is a (fill colour, shape) pair drawn as an anti-aliased blob on a
textured canvas.  Every continual subset and the unseen split live in their own
visual domain (canvas colour, grating texture, global tint), the desk-scale
analogue of the distinct source datasets of a real continual benchmark.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from ..detector.types import ImageSample
from ..errors import ConfigError, DataError
from ..rng import stream

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar")
PALETTE = {
    "red": (0.92, 0.12, 0.12),
    "green": (0.12, 0.78, 0.22),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.88, 0.10),
    "purple": (0.62, 0.18, 0.85),
    "white": (0.97, 0.97, 0.97),
}


@dataclass(frozen=True)
class Domain:
    canvas: tuple      # base rgb
    tint: tuple        # multiplicative rgb cast on the whole image
    angle: float       # grating orientation
    freq: float        # grating cycles per image
    contrast: float
    noise: float

    @classmethod
    def sample(cls, rng: np.random.Generator, canvas=None) -> "Domain":
        base = rng.uniform(0.2, 0.8, size=3) if canvas is None else np.asarray(canvas, dtype=np.float64)
        tint = 0.85 + 0.25 * (base - 0.2) / 0.6   # mild cast towards the canvas colour
        return cls(tuple(float(v) for v in base), tuple(float(v) for v in tint), float(rng.uniform(0, np.pi)), float(rng.uniform(2, 7)),
                   float(rng.uniform(0.06, 0.16)), float(rng.uniform(0.01, 0.04)))


@dataclass
class Subset:
    name: str
    classes: tuple
    train: list = field(default_factory=list)
    eval: list = field(default_factory=list)
    domain: Domain | None = None


@dataclass
class ContinualTask:
    seed: int
    subsets: list            # D_1..D_T
    unseen: Subset
    pretrain: Subset
    image_size: int
    shots: int

    @property
    def T(self) -> int:
        return len(self.subsets)

    @property
    def seen_classes(self) -> tuple:
        return tuple(c for s in self.subsets for c in s.classes)

    def all_class_names(self) -> tuple:
        return tuple(self.pretrain.classes) + self.seen_classes + tuple(self.unseen.classes)

    def splits(self):
        yield self.pretrain
        yield from self.subsets
        yield self.unseen

    def digest(self) -> str:
        h = hashlib.sha256()
        for sub in self.splits():
            h.update(repr((sub.name, sub.classes, sub.domain)).encode())
            for part in (sub.train, sub.eval):
                for s in part:
                    h.update(np.ascontiguousarray(s.pixels).tobytes())
                    h.update(np.ascontiguousarray(s.boxes).tobytes())
                    h.update(repr((s.image_id, s.labels)).encode())
        return h.hexdigest()


# ---------------------------------------------------------------- rendering


def _shape_extent(shape: str, size: float) -> tuple[float, float]:
    if shape == "bar":
        return size, size * 0.38
    if shape == "triangle":
        return size, size * 0.87
    return size, size


def _coverage(shape: str, xs, ys, w: float, h: float) -> np.ndarray:
    """Signed-distance coverage for a shape centred at 0 with box (w, h) pixels."""
    if shape == "circle":
        d = np.hypot(xs, ys) - w / 2
    elif shape == "square" or shape == "bar":
        d = np.maximum(np.abs(xs) - w / 2, np.abs(ys) - h / 2)
    elif shape == "ring":
        r = w / 2
        t = max(r * 0.3, 1.2)
        d = np.abs(np.hypot(xs, ys) - (r - t)) - t
    elif shape == "cross":
        arm = w * 0.17
        d1 = np.maximum(np.abs(xs) - w / 2, np.abs(ys) - arm)
        d2 = np.maximum(np.abs(xs) - arm, np.abs(ys) - h / 2)
        d = np.minimum(d1, d2)
    elif shape == "triangle":
        # apex up; edges through (0,-h/2) and (+-w/2, h/2)
        base = ys - h / 2
        k = h / (w / 2)
        n = np.hypot(1.0, 1.0 / k)
        side = (np.abs(xs) - (ys + h / 2) / k) / n
        d = np.maximum(base, side)
    else:
        raise DataError(f"unknown shape {shape!r}")
    return np.clip(0.5 - d, 0.0, 1.0)


def render_canvas(domain: Domain, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi)
    u = np.cos(domain.angle) * xx + np.sin(domain.angle) * yy
    grating = domain.contrast * np.sin(2 * np.pi * domain.freq * u + phase)
    img = np.asarray(domain.canvas)[None, None, :] + grating[..., None]
    img = img + rng.normal(0, domain.noise, size=img.shape)
    return img


def render_image(domain: Domain, instances, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``instances``: list of (colour, shape, cx_px, cy_px, size_px).  Returns pixels and cxcywh boxes."""
    img = render_canvas(domain, size, rng)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    boxes = []
    for colour, shape, cx, cy, s in instances:
        w, h = _shape_extent(shape, s)
        alpha = _coverage(shape, xx - cx, yy - cy, w, h)[..., None]
        fill = np.asarray(PALETTE[colour]) + rng.normal(0, 0.02, size=3)
        img = alpha * fill[None, None, :] + (1 - alpha) * img
        x0, x1 = max(cx - w / 2, 0.0), min(cx + w / 2, size)
        y0, y1 = max(cy - h / 2, 0.0), min(cy + h / 2, size)
        boxes.append([(x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size])
    img = img * np.asarray(domain.tint)[None, None, :]
    return np.clip(img, 0.0, 1.0), np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def _place(rng, classes_for_instances, size, min_size, max_size, required=None):
    """Non-overlapping placements; optional extras that do not fit are dropped."""
    placed = []
    for name in classes_for_instances:
        colour, shape = name.split(" ")
        for _ in range(200):
            s = rng.uniform(min_size, max_size)
            w, h = _shape_extent(shape, s)
            cx = rng.uniform(w / 2 + 1, size - w / 2 - 1)
            cy = rng.uniform(h / 2 + 1, size - h / 2 - 1)
            ok = all(abs(cx - px) > (w + pw) / 2 + 1 or abs(cy - py) > (h + ph) / 2 + 1
                     for _, psh, px, py, ps in placed for pw, ph in [_shape_extent(psh, ps)])
            if ok:
                placed.append((colour, shape, cx, cy, s))
                break
        else:
            if name == required and not any(f"{c} {sh}" == required for c, sh, *_ in placed):
                raise DataError(f"could not place {required!r} without overlap")
    return placed


def make_image(rng, domain, classes, required, size, image_id, max_instances=3,
               min_size=None, max_size=None) -> ImageSample:
    min_size = min_size or size * 0.18
    max_size = max_size or size * 0.36
    n = int(rng.integers(1, max_instances + 1))
    names = [required] if required is not None else []
    while len(names) < n:
        names.append(classes[int(rng.integers(len(classes)))])
    order = rng.permutation(len(names))
    names = [names[i] for i in order]
    for attempt in range(20):   # a fresh layout when the required instance was crowded out
        try:
            inst = _place(rng, names, size, min_size, max_size, required)
            break
        except DataError:
            if attempt == 19:
                raise
    pixels, boxes = render_image(domain, inst, size, rng)
    return ImageSample(pixels, boxes, [f"{c} {s}" for c, s, *_ in inst], image_id)


# ---------------------------------------------------------------- task


def class_pool(rng: np.random.Generator, n_pretrain: int, n_seen: int, n_unseen: int):
    """Split the colour x shape grid into disjoint pretrain / seen / unseen class lists.

    The pretrain classes always include one diagonal of the grid so that every
    colour word and every shape word is seen during pretraining.
    """
    combos = [f"{c} {s}" for c, s in itertools.product(PALETTE, SHAPES)]
    need = n_pretrain + n_seen + n_unseen
    if need > len(combos):
        raise ConfigError(f"class budget {need} exceeds {len(combos)} colour x shape combinations")
    if n_pretrain < len(SHAPES):
        raise ConfigError(f"pretraining needs at least {len(SHAPES)} classes to cover the vocabulary")
    colours = list(PALETTE)
    perm = rng.permutation(len(SHAPES))
    diagonal = [f"{colours[i]} {SHAPES[perm[i]]}" for i in range(len(SHAPES))]
    rest = [c for c in combos if c not in diagonal]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    pretrain = diagonal + rest[: n_pretrain - len(diagonal)]
    rest = rest[n_pretrain - len(diagonal):]
    return pretrain, rest[:n_seen], rest[n_seen:n_seen + n_unseen]


CANVAS_LEVELS = (0.2, 0.5, 0.8)


def domain_canvases(rng, count) -> list:
    """Canvas colours for ``count`` domains: cube corners first, then the rest of a 3-level lattice.

    Corners are visited in farthest-point order from a seeded start, so
    domains are about as far apart as the RGB cube allows and a whole-image
    embedding can tell them apart.  Beyond 26 domains colours repeat.
    """
    lo, mid, hi = CANVAS_LEVELS
    corners = np.array(list(itertools.product((lo, hi), repeat=3)))
    rest = np.array([p for p in itertools.product(CANVAS_LEVELS, repeat=3)
                     if mid in p and p != (mid, mid, mid)])
    chosen = [corners[int(rng.integers(len(corners)))]]
    for grid in (corners, rest):
        left = [g for g in grid if not any(np.array_equal(g, c) for c in chosen)]
        while left and len(chosen) < count:
            d = [min(np.linalg.norm(g - c) for c in chosen) for g in left]
            chosen.append(left.pop(int(np.argmax(d))))   # ties resolve to the earliest candidate
    return [tuple(float(v) for v in chosen[i % len(chosen)]) for i in range(count)]


def generate_synthetic_task(seed: int = 0, T: int = 6, classes_per_subset: int = 3, shots: int = 10,
                            eval_size: int = 12, unseen_eval_size: int = 36, n_pretrain_classes: int = 9,
                            n_unseen_classes: int = 9, pretrain_images: int = 360, image_size: int = 64,
                            max_instances: int = 3, n_queries: int = 12) -> ContinualTask:
    for k, v in dict(T=T, classes_per_subset=classes_per_subset, shots=shots, eval_size=eval_size,
                     unseen_eval_size=unseen_eval_size, n_unseen_classes=n_unseen_classes,
                     pretrain_images=pretrain_images, image_size=image_size, max_instances=max_instances).items():
        if v <= 0:
            raise ConfigError(f"{k} must be positive, got {v}")
    if max_instances > n_queries:
        raise ConfigError(f"max_instances={max_instances} exceeds n_queries={n_queries}")
    rng = stream(seed, "task")
    pretrain_cls, seen_cls, unseen_cls = class_pool(rng, n_pretrain_classes, T * classes_per_subset,
                                                    n_unseen_classes)
    # continual subsets and the unseen split each get their own, well separated canvas colour
    canvases = domain_canvases(stream(seed, "canvases"), T + 1)
    next_id = iter(range(1, 10**9))
    kw = dict(size=image_size, max_instances=max_instances)

    subsets = []
    for t in range(T):
        classes = tuple(seen_cls[t * classes_per_subset:(t + 1) * classes_per_subset])
        drng = stream(seed, "subset", t)
        domain = Domain.sample(drng, canvases[t])
        sub = Subset(f"subset{t + 1:02d}", classes, domain=domain)
        for k in classes:
            for _ in range(shots):
                sub.train.append(make_image(drng, domain, classes, k, image_id=next(next_id), **kw))
        erng = stream(seed, "subset-eval", t)   # eval images do not depend on the shot count
        for i in range(eval_size):
            sub.eval.append(make_image(erng, domain, classes, classes[i % len(classes)],
                                       image_id=next(next_id), **kw))
        subsets.append(sub)

    urng = stream(seed, "unseen")
    udomain = Domain.sample(urng, canvases[T])
    unseen = Subset("unseen", tuple(unseen_cls), domain=udomain)
    for i in range(unseen_eval_size):
        unseen.eval.append(make_image(urng, udomain, unseen.classes, unseen.classes[i % len(unseen.classes)],
                                      image_id=next(next_id), **kw))

    prng = stream(seed, "pretrain")
    pre = Subset("pretrain", tuple(pretrain_cls), domain=None)
    for i in range(pretrain_images):
        domain = Domain.sample(prng)
        pre.train.append(make_image(prng, domain, pre.classes, pre.classes[i % len(pre.classes)],
                                    image_id=next(next_id), **kw))
    for i in range(max(eval_size, len(pre.classes))):
        domain = Domain.sample(prng)
        pre.eval.append(make_image(prng, domain, pre.classes, pre.classes[i % len(pre.classes)],
                                   image_id=next(next_id), **kw))
    return ContinualTask(seed, subsets, unseen, pre, image_size, shots)
