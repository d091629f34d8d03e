"""Append-only memory pool: per-step triplets of prototypes, concept memory and interaction memory."""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, FormatError, SequencingError
from ..fileio import atomic_write
from ..tensor import Tensor
from .memories import ConceptMemory, InteractionMemory, InteractionMemoryLayer

MAGIC = b"OWMP"
VERSION = 1
_PREFIX = len(MAGIC) + 1 + 4  # magic, version byte, header length


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MemoryTriplet:
    """Memories learned at one continual step.  Arrays are read-only copies."""

    step: int
    labels: tuple
    prototypes: np.ndarray          # (len(labels), d) unit rows
    prompt: np.ndarray              # (P, d)
    inc: tuple                      # per layer: tuple of (name, A, B), names sorted

    @classmethod
    def create(cls, step, labels, prototypes, theta_con: ConceptMemory,
               theta_inc: InteractionMemory) -> "MemoryTriplet":
        labels = tuple(labels)
        if not labels:
            raise DataError("a triplet needs a non-empty label set")
        protos = _frozen(prototypes).reshape(len(labels), -1)
        norms = np.linalg.norm(protos, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise DataError(f"prototypes must be unit vectors, norms {norms}")
        inc = tuple(tuple((name, _frozen(a.data), _frozen(b.data)) for name, (a, b) in sorted(layer.pairs.items()))
                    for layer in theta_inc.layers)
        return cls(int(step), labels, protos, _frozen(theta_con.prompt.data), inc)

    def concept_memory(self) -> ConceptMemory:
        """A fresh, writable copy."""
        return ConceptMemory(Tensor(self.prompt.copy()))

    def interaction_memory(self) -> InteractionMemory:
        return InteractionMemory([InteractionMemoryLayer({n: (Tensor(a.copy()), Tensor(b.copy())) for n, a, b in layer})
                                  for layer in self.inc])

    def tensors(self):
        """(name, array) pairs in canonical serialization order."""
        yield "proto", self.prototypes
        yield "con.prompt", self.prompt
        for i, layer in enumerate(self.inc):
            for name, a, b in layer:
                yield f"inc.{i}.{name}.A", a
                yield f"inc.{i}.{name}.B", b

    def digest(self) -> str:
        h = hashlib.sha256(repr((self.step, self.labels)).encode())
        for name, arr in self.tensors():
            h.update(name.encode())
            h.update(repr(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class MemoryPool:
    triplets: tuple = ()
    config: dict = field(default_factory=dict)   # detector config snapshot
    version: int = VERSION

    def __len__(self) -> int:
        return len(self.triplets)

    @property
    def last_step(self) -> int:
        return self.triplets[-1].step if self.triplets else 0

    def step(self, t: int) -> MemoryTriplet:
        for tr in self.triplets:
            if tr.step == t:
                return tr
        raise DataError(f"no triplet for step {t}")


def memorize(pool: MemoryPool, triplet: MemoryTriplet) -> MemoryPool:
    """Return a new pool with ``triplet`` appended; existing triplets are shared unchanged."""
    if triplet.step != pool.last_step + 1:
        raise SequencingError(f"cannot memorize step {triplet.step} after step {pool.last_step}")
    return MemoryPool(pool.triplets + (triplet,), pool.config, pool.version)


def init_step_memories(pool: MemoryPool, config, rng: np.random.Generator):
    """Starting memories for the next step: fresh at step 1, else copies of the last triplet."""
    if not pool.triplets:
        return ConceptMemory.init(config, rng), InteractionMemory.init(config, rng)
    last = pool.triplets[-1]
    return last.concept_memory(), last.interaction_memory()


# ---------------------------------------------------------------- prototypes


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def crop_box(pixels: np.ndarray, box, margin: float, out_size: int) -> np.ndarray:
    """Crop a cxcywh box grown by ``margin`` of its size on each side, clamped, then resized."""
    h, w = pixels.shape[:2]
    cx, cy, bw, bh = box
    bw, bh = bw * (1 + 2 * margin), bh * (1 + 2 * margin)
    x0 = int(np.floor(max(cx - bw / 2, 0.0) * w))
    x1 = int(np.ceil(min(cx + bw / 2, 1.0) * w))
    y0 = int(np.floor(max(cy - bh / 2, 0.0) * h))
    y1 = int(np.ceil(min(cy + bh / 2, 1.0) * h))
    x1, y1 = max(x1, x0 + 1), max(y1, y0 + 1)
    return resize_bilinear(pixels[y0:y1, x0:x1], out_size, out_size)


def build_prototypes(samples, classes, embed, out_size: int, rng: np.random.Generator,
                     n_crops: int = 8, margin: float = 0.2, jitter: float = 0.1) -> np.ndarray:
    """Per-class prototypes: L2-normalised mean global embedding of instance crops.

    Every ground-truth instance is cropped once at ``margin``; further crops
    cycle through the instances with margins jittered uniformly by
    ``+-jitter`` until ``n_crops`` exist.  ``embed`` maps pixels to a unit vector.
    """
    protos = []
    for k in classes:
        inst = [(s.pixels, b) for s in samples for b, l in zip(s.boxes, s.labels) if l == k]
        if not inst:
            raise DataError(f"class {k!r} has no training instance to build a prototype from")
        crops = [crop_box(px, b, margin, out_size) for px, b in inst[:n_crops]]
        j = 0
        while len(crops) < n_crops:
            px, b = inst[j % len(inst)]
            crops.append(crop_box(px, b, margin + rng.uniform(-jitter, jitter), out_size))
            j += 1
        g = np.mean([embed(c) for c in crops], axis=0)
        protos.append(g / np.linalg.norm(g))
    return np.asarray(protos)


# ---------------------------------------------------------------- parameter counts


def count_added_params(config, steps: int = 1) -> dict:
    """Parameters added per step (one triplet, excluding prototypes) and cumulatively."""
    prompt = config.prompt_length * config.d_model
    per_layer = len(config.lora_projections) * 2 * config.lora_rank * config.d_model
    per_step = prompt + config.lora_layers * per_layer
    return {"prompt": prompt, "per_layer": per_layer, "layers": config.lora_layers,
            "per_step": per_step, "cumulative": per_step * steps}


# ---------------------------------------------------------------- serialization


def _header(pool: MemoryPool) -> tuple[dict, list]:
    arrays, entries, offset = [], [], 0
    for tr in pool.triplets:
        manifest = []
        for name, arr in tr.tensors():
            nbytes = arr.size * 8
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
            arrays.append(arr)
            offset += nbytes
        entries.append({"step": tr.step, "labels": list(tr.labels), "tensors": manifest})
    header = {"version": pool.version, "config": pool.config, "steps": len(pool.triplets),
              "triplets": entries, "payload_bytes": offset}
    return header, arrays


def dumps_pool(pool: MemoryPool) -> bytes:
    header, arrays = _header(pool)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_pool(pool: MemoryPool, path) -> None:
    """Atomic write: temp file in the target directory, fsync, rename."""
    atomic_write(path, dumps_pool(pool))


def loads_pool(data: bytes) -> MemoryPool:
    n = len(data)
    if n < _PREFIX + 4:
        raise FormatError(f"file too short ({n} bytes)", n)
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    if data[4] != VERSION:
        raise FormatError(f"unsupported version {data[4]}", 4)
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored:
        raise FormatError("checksum mismatch", n - 4)
    (hlen,) = struct.unpack("<I", data[5:9])
    if _PREFIX + hlen > n - 4:
        raise FormatError(f"header length {hlen} runs past end of file", 5)
    try:
        header = json.loads(data[_PREFIX:_PREFIX + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}", _PREFIX) from None
    base = _PREFIX + hlen
    payload_end = n - 4
    try:
        if header["payload_bytes"] != payload_end - base:
            raise FormatError(f"payload is {payload_end - base} bytes, header says {header['payload_bytes']}", base)
        triplets = []
        for entry in header["triplets"]:
            arrays = {}
            for t in entry["tensors"]:
                start = base + int(t["offset"])
                shape = tuple(int(s) for s in t["shape"])
                count = int(np.prod(shape)) if shape else 1
                if t["nbytes"] != count * 8 or start + t["nbytes"] > payload_end:
                    raise FormatError(f"tensor {t['name']} out of bounds", start)
                arrays[t["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(shape)
            triplets.append(_triplet_from_arrays(entry["step"], entry["labels"], arrays))
        pool = MemoryPool(tuple(triplets), header["config"], header["version"])
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, DataError) as e:
        raise FormatError(f"inconsistent header: {e}", _PREFIX) from None
    for i, tr in enumerate(pool.triplets):
        if tr.step != i + 1:
            raise FormatError(f"step indices not consecutive at triplet {i}", _PREFIX)
    return pool


def _triplet_from_arrays(step, labels, arrays) -> MemoryTriplet:
    layers = {}
    for name, arr in arrays.items():
        if name.startswith("inc."):
            _, i, proj, ab = name.split(".")
            layers.setdefault(int(i), {}).setdefault(proj, {})[ab] = arr
    if sorted(layers) != list(range(len(layers))):
        raise ValueError("interaction memory layers are not contiguous")
    inc = tuple(tuple((p, _frozen(d["A"]), _frozen(d["B"])) for p, d in sorted(layers[i].items()))
                for i in range(len(layers)))
    protos = _frozen(arrays["proto"])
    if len(protos) != len(labels) or not labels:
        raise ValueError("prototype count does not match label set")
    return MemoryTriplet(int(step), tuple(labels), protos, _frozen(arrays["con.prompt"]), inc)


def load_pool(path) -> MemoryPool:
    with open(path, "rb") as f:
        return loads_pool(f.read())
