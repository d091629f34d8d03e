"""Miniature open-vocabulary detector.

Pipeline per image and class sentence:

    pixels -> patch projection + positional encoding -> image encoder (F_I, g_I)
    tokens -> embedding [+ prompt tokens] -> text encoder                     (F_T)
    (F_I, F_T) -> fusion layers (self-attn, text<-image, image<-text, FFN)    (F_I', F_T')
    learnable queries -> decoder over F_I' -> boxes; logits vs pooled class spans

The fusion cross-attentions carry the insertion points for the low-rank
interaction memory; the text encoder carries the prompt (concept) memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import DataError, NumericalError, ShapeError
from ..optim import ParamStore
from ..rng import stream
from ..tensor import Tensor
from .boxes import cxcywh_to_xyxy, xyxy_to_cxcywh
from .config import DetectorConfig
from .text import ClassSentence
from .types import Detection, EncodedImage, ImageSample


@dataclass
class DetectorOutput:
    boxes: Tensor    # (n_queries, 4) cxcywh in (0, 1)
    logits: Tensor   # (n_queries, n_classes)
    names: tuple


def sinusoid_2d(grid: int, d: int) -> np.ndarray:
    """Fixed 2-D sine/cosine encoding; half the channels for x, half for y."""
    quarter = max(d // 4, 1)
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    coords = (np.arange(grid) + 0.5) / grid
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    parts = []
    for c in (xs.ravel(), ys.ravel()):
        ang = 2 * np.pi * c[:, None] * freqs[None, :] * 4
        parts += [np.sin(ang), np.cos(ang)]
    enc = np.concatenate(parts, axis=1)
    out = np.zeros((grid * grid, d))
    out[:, : min(d, enc.shape[1])] = enc[:, :d]
    return out


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    h, w, c = pixels.shape
    g = h // patch
    x = pixels.reshape(g, patch, w // patch, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(g * (w // patch), patch * patch * c)


class Detector:
    def __init__(self, config: DetectorConfig, seed: int = 0):
        self.config = config
        self.params = ParamStore()
        self._rng = stream(seed, "detector-init")
        self._build()
        cfg = config
        self.image_pos = sinusoid_2d(cfg.image_grid, cfg.d_model) if cfg.positional_encoding \
            else np.zeros((cfg.image_grid**2, cfg.d_model))
        c = (np.arange(cfg.image_grid) + 0.5) / cfg.image_grid
        ys, xs = np.meshgrid(c, c, indexing="ij")
        self.token_xy = np.stack([xs.ravel(), ys.ravel()], axis=1)

    # ------------------------------------------------------------ parameters

    def _w(self, name, fan_in, fan_out, gain=1.0, trainable=True):
        std = gain * np.sqrt(2.0 / (fan_in + fan_out))
        self.params.add(name + ".W", self._rng.normal(0, std, size=(fan_in, fan_out)), trainable)
        self.params.add(name + ".b", np.zeros(fan_out), trainable)

    def _ln(self, name):
        self.params.add(name + ".g", np.ones(self.config.d_model))
        self.params.add(name + ".b", np.zeros(self.config.d_model))

    def _attn_params(self, name, tied=False):
        d = self.config.d_model
        if tied:
            self._w(name + ".qk", d, d)
        else:
            self._w(name + ".q", d, d)
            self._w(name + ".k", d, d)
        self._w(name + ".v", d, d)
        self._w(name + ".o", d, d, gain=0.5)

    def _block_params(self, name, ffn_dim):
        d = self.config.d_model
        self._ln(name + ".ln1")
        self._attn_params(name + ".sa")
        self._ln(name + ".ln2")
        self._w(name + ".ffn.1", d, ffn_dim)
        self._w(name + ".ffn.2", ffn_dim, d, gain=0.5)

    def _build(self):
        cfg = self.config
        d = cfg.d_model
        patch_dim = cfg.patch_size**2 * 3
        self._w("img.patch", patch_dim, d, gain=2.0)
        for i in range(cfg.image_layers):
            self._block_params(f"img.enc{i}", cfg.ffn_dim)
        self._ln("img.ln")
        # reference point for the retrieval embedding; set from the pretrain split once the base is trained
        self.params.add("img.center", np.zeros(d), False)

        vocab = max(len(cfg.vocab), 1)
        self.params.add("txt.embed", self._rng.normal(0, 1.0, size=(vocab, d)))
        self.params.add("txt.pos", self._rng.normal(0, 0.1, size=(cfg.max_text_len, d)))
        for i in range(cfg.text_layers):
            self._block_params(f"txt.enc{i}", cfg.text_ffn_dim)
        self._ln("txt.ln")

        for l in range(cfg.fusion_layers):
            p = f"fus{l}"
            for side in ("i", "t"):
                self._ln(f"{p}.sa_{side}.ln")
                self._attn_params(f"{p}.sa_{side}")
            for direction in ("it", "ti"):
                self._ln(f"{p}.{direction}.lnq")
                self._ln(f"{p}.{direction}.lnkv")
                self._attn_params(f"{p}.{direction}", tied=cfg.tie_qk)
            for side in ("i", "t"):
                self._ln(f"{p}.ffn_{side}.ln")
                self._w(f"{p}.ffn_{side}.1", d, cfg.ffn_dim)
                self._w(f"{p}.ffn_{side}.2", cfg.ffn_dim, d, gain=0.5)

        self.params.add("dec.query", self._rng.normal(0, 1.0, size=(cfg.n_queries, d)))
        self.params.add("dec.ref", self._initial_refs(cfg.n_queries))
        for j in range(cfg.decoder_layers):
            p = f"dec{j}"
            self._ln(f"{p}.ln_sa")
            self._attn_params(f"{p}.sa")
            self._ln(f"{p}.ln_ca")
            self._ln(f"{p}.ln_kv")
            self._attn_params(f"{p}.ca")
            self._ln(f"{p}.ln_ffn")
            self._w(f"{p}.ffn.1", d, cfg.ffn_dim)
            self._w(f"{p}.ffn.2", cfg.ffn_dim, d, gain=0.5)
        self._ln("dec.ln")
        self._w("box.1", d, d)
        self._ln("loc.ln")
        self._w("loc.q", d, d)
        self._w("loc.k", d, d)
        self._w("loc.v", d, d)
        self._w("roi.v", d, d)
        self._w("box.2", d, 4, gain=0.1)
        self._w("cls.q", d, d)
        self._w("cls.t", d, d)
        self.params.add("cls.bias", np.array([-2.0]))

    @staticmethod
    def _initial_refs(n):
        cols = int(np.ceil(np.sqrt(n)))
        rows = int(np.ceil(n / cols))
        pts = [((c + 0.5) / cols, (r + 0.5) / rows) for r in range(rows) for c in range(cols)][:n]
        pts = np.clip(np.array(pts), 1e-3, 1 - 1e-3)
        return np.log(pts / (1 - pts))

    def num_params(self) -> int:
        return self.params.num_params()

    def set_embedding_center(self, images) -> np.ndarray:
        """Centre the retrieval embedding on the mean token feature of ``images``."""
        p = self.params["img.center"]
        p.data[...] = 0.0
        with T.no_grad():
            feats = [self.encode_image(im).features.data.mean(axis=0) for im in images]
        p.data[...] = np.mean(feats, axis=0)
        return p.data.copy()

    def with_memory_layers(self, lora_layers: int) -> "Detector":
        """Same (shared) base weights, memories inserted into a different number of fusion layers."""
        view = object.__new__(Detector)
        view.__dict__.update(self.__dict__)
        view.config = self.config.replace(lora_layers=lora_layers)
        return view

    def freeze(self) -> None:
        self.params.freeze()

    # ------------------------------------------------------------ building blocks

    def _linear(self, x, name, lora=None):
        p = self.params
        out = T.add(T.matmul(x, p[name + ".W"]), p[name + ".b"])
        if lora is not None:
            a, b = lora
            out = T.add(out, T.matmul(T.matmul(x, T.transpose(a)), T.transpose(b)))
        return out

    def _layer_norm(self, x, name):
        p = self.params
        return T.add(T.mul(T.layer_norm(x), p[name + ".g"]), p[name + ".b"])

    def _heads(self, x):
        n = x.shape[0]
        cfg = self.config
        return T.transpose(T.reshape(x, (n, cfg.n_heads, cfg.head_dim)), (1, 0, 2))

    def _attend(self, q, k, v, bias=None):
        cfg = self.config
        qh, kh, vh = self._heads(q), self._heads(k), self._heads(v)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(cfg.head_dim))
        if bias is not None:
            scores = T.add(scores, bias)
        out = T.matmul(T.softmax(scores, axis=-1), vh)
        return T.reshape(T.transpose(out, (1, 0, 2)), (q.shape[0], cfg.d_model))

    def _self_attention(self, x, name, bias=None):
        q = self._linear(x, name + ".q")
        k = self._linear(x, name + ".k")
        v = self._linear(x, name + ".v")
        return self._linear(self._attend(q, k, v, bias), name + ".o")

    def _cross_attention(self, xq, xkv, name, lora=None):
        """Eq.-style aggregation with optional low-rank updates on q/k/v.

        ``lora`` maps suffixes ("qk" or "q"/"k", and "v") to (A, B) pairs.
        """
        lora = lora or {}
        if self.config.tie_qk:
            q = self._linear(xq, name + ".qk", lora.get("qk"))
            k = self._linear(xkv, name + ".qk", lora.get("qk"))
        else:
            q = self._linear(xq, name + ".q", lora.get("q"))
            k = self._linear(xkv, name + ".k", lora.get("k"))
        v = self._linear(xkv, name + ".v", lora.get("v"))
        return self._linear(self._attend(q, k, v), name + ".o")

    def _ffn(self, x, name):
        return self._linear(T.gelu(self._linear(x, name + ".1")), name + ".2")

    def _block(self, x, name):
        x = T.add(x, self._self_attention(self._layer_norm(x, name + ".ln1"), name + ".sa"))
        return T.add(x, self._ffn(self._layer_norm(x, name + ".ln2"), name + ".ffn"))

    # ------------------------------------------------------------ encoders

    def encode_image(self, image) -> EncodedImage:
        pixels = image.pixels if isinstance(image, ImageSample) else np.asarray(image)
        size = self.config.image_size
        if pixels.shape != (size, size, 3):
            raise DataError(f"image shape {pixels.shape} != configured {(size, size, 3)}")
        patches = Tensor(patchify(pixels.astype(np.float64), self.config.patch_size))
        x = T.add(self._linear(patches, "img.patch"), Tensor(self.image_pos))
        for i in range(self.config.image_layers):
            x = self._block(x, f"img.enc{i}")
        x = self._layer_norm(x, "img.ln")
        g = x.data.mean(axis=0) - self.params["img.center"].data
        norm = np.linalg.norm(g)
        if not norm > 0:
            raise NumericalError("global embedding coincides with the reference centre")
        g = g / norm
        return EncodedImage(x, g)

    def encode_text(self, sentence: ClassSentence, theta_con=None) -> Tensor:
        """Text features; with a concept memory its P rows come first."""
        cfg = self.config
        ids = np.asarray(sentence.token_ids, dtype=int)
        if len(ids) > cfg.max_text_len:
            raise DataError(f"sentence of {len(ids)} tokens exceeds max_text_len={cfg.max_text_len}")
        if len(ids) and (ids.min() < 0 or ids.max() >= len(cfg.vocab)):
            raise DataError("token id outside vocabulary")
        e = T.add(self.params["txt.embed"][ids], self.params["txt.pos"][: len(ids)])
        if theta_con is not None and theta_con.length:
            if theta_con.prompt.shape[1] != cfg.d_model:
                raise ShapeError(f"prompt width {theta_con.prompt.shape} != d_model {cfg.d_model}")
            e = T.concat([theta_con.prompt, e], axis=0)
        for i in range(cfg.text_layers):
            e = self._block(e, f"txt.enc{i}")
        return self._layer_norm(e, "txt.ln")

    # ------------------------------------------------------------ fusion

    def fusion_layer(self, index: int, f_img, f_txt, inc_layer=None):
        p = f"fus{index}"
        lora_it, lora_ti = {}, {}
        if inc_layer is not None:
            for full, pair in inc_layer.pairs.items():
                direction, proj = full.split("_")
                (lora_it if direction == "it" else lora_ti)[proj] = pair
        # (1) refine each modality
        f_img = T.add(f_img, self._self_attention(self._layer_norm(f_img, f"{p}.sa_i.ln"), f"{p}.sa_i"))
        f_txt = T.add(f_txt, self._self_attention(self._layer_norm(f_txt, f"{p}.sa_t.ln"), f"{p}.sa_t"))
        # (2) aggregated text feature: text queries over image keys/values
        agg_t = self._cross_attention(self._layer_norm(f_txt, f"{p}.it.lnq"),
                                      self._layer_norm(f_img, f"{p}.it.lnkv"), f"{p}.it", lora_it)
        f_txt = T.add(f_txt, agg_t)
        # (3) aggregated image feature: image queries over the aggregated text
        agg_i = self._cross_attention(self._layer_norm(f_img, f"{p}.ti.lnq"),
                                      self._layer_norm(f_txt, f"{p}.ti.lnkv"), f"{p}.ti", lora_ti)
        f_img = T.add(f_img, agg_i)
        # (4) feed-forward per branch
        f_img = T.add(f_img, self._ffn(self._layer_norm(f_img, f"{p}.ffn_i.ln"), f"{p}.ffn_i"))
        f_txt = T.add(f_txt, self._ffn(self._layer_norm(f_txt, f"{p}.ffn_t.ln"), f"{p}.ffn_t"))
        return f_img, f_txt

    def fuse(self, f_img, f_txt, theta_inc=None):
        carriers = self.config.lora_layer_indices()
        for l in range(self.config.fusion_layers):
            inc = None
            if theta_inc is not None and l in carriers:
                inc = theta_inc.layers[carriers.index(l)]
            f_img, f_txt = self.fusion_layer(l, f_img, f_txt, inc)
        return f_img, f_txt

    # ------------------------------------------------------------ decoder

    def decode(self, f_img, f_txt, sentence: ClassSentence, n_prompt: int = 0) -> DetectorOutput:
        cfg = self.config
        p = self.params
        ref_logit = p["dec.ref"]
        ref = T.sigmoid(ref_logit)
        dx = T.sub(Tensor(self.token_xy[None, :, 0]), ref[:, 0:1])
        dy = T.sub(Tensor(self.token_xy[None, :, 1]), ref[:, 1:2])
        spatial = T.scale(T.add(T.mul(dx, dx), T.mul(dy, dy)), -0.5 / cfg.spatial_sigma**2)
        q = p["dec.query"]
        for j in range(cfg.decoder_layers):
            name = f"dec{j}"
            q = T.add(q, self._self_attention(self._layer_norm(q, f"{name}.ln_sa"), f"{name}.sa"))
            kv = self._layer_norm(f_img, f"{name}.ln_kv")
            qn = self._layer_norm(q, f"{name}.ln_ca")
            qh = self._linear(qn, f"{name}.ca.q")
            kh = self._linear(kv, f"{name}.ca.k")
            vh = self._linear(kv, f"{name}.ca.v")
            q = T.add(q, self._linear(self._attend(qh, kh, vh, spatial), f"{name}.ca.o"))
            q = T.add(q, self._ffn(self._layer_norm(q, f"{name}.ln_ffn"), f"{name}.ffn"))
        h = self._layer_norm(q, "dec.ln")

        # localisation attention: centroid and spread of the attended tokens
        # give the initial box, the box head refines it in logit space
        kv = self._layer_norm(f_img, "loc.ln")
        lk = self._linear(kv, "loc.k")
        lq = self._linear(h, "loc.q")
        att = T.softmax(T.add(T.scale(T.matmul(lq, T.transpose(lk)), 1.0 / np.sqrt(cfg.d_model)), spatial))
        mu = T.matmul(att, Tensor(self.token_xy))
        var = T.sub(T.matmul(att, Tensor(self.token_xy**2)), T.mul(mu, mu))
        spread = T.scale(T.sqrt(T.add(var, 1e-6)), np.sqrt(12.0))  # uniform extent w has std w/sqrt(12)
        spread = T.minimum(T.maximum(spread, 0.02), 0.98)
        h = T.add(h, T.matmul(att, self._linear(kv, "loc.v")))  # appearance under the same attention
        delta = self._linear(T.relu(self._linear(h, "box.1")), "box.2")
        centre = T.sigmoid(T.add(delta[:, 0:2], _logit(mu)))
        extent = T.sigmoid(T.add(delta[:, 2:4], _logit(spread)))
        boxes = T.concat([centre, extent], axis=1)

        pooled = [T.mean(f_txt[n_prompt + s: n_prompt + e], axis=0, keepdims=True)
                  for s, e in sentence.spans]
        pooled = T.concat(pooled, axis=0)
        if len(sentence.spans) > 1:  # remove what all class names share
            pooled = T.sub(pooled, T.mean(pooled, axis=0, keepdims=True))
        cls_txt = T.l2_normalize(self._linear(pooled, "cls.t"))
        # box-masked pooling of the fused image tokens
        h_cls = T.add(h, T.matmul(self._box_mask(boxes), self._linear(kv, "roi.v")))
        cls_q = T.l2_normalize(self._linear(h_cls, "cls.q"))
        logits = T.add(T.scale(T.matmul(cls_q, T.transpose(cls_txt)), cfg.logit_scale), p["cls.bias"])
        return DetectorOutput(boxes, logits, sentence.names)

    def _box_mask(self, boxes: Tensor) -> Tensor:
        """Row-normalised soft membership of each token centre in each cxcywh box."""
        cell = 1.0 / self.config.image_grid

        def axis(k):
            d = T.abs_(T.sub(Tensor(self.token_xy[None, :, k]), boxes[:, k:k + 1]))
            m = T.add(T.scale(T.sub(T.scale(boxes[:, k + 2:k + 3], 0.5), d), 1.0 / cell), 0.5)
            return T.minimum(T.maximum(m, 0.0), 1.0)

        m = T.add(T.mul(axis(0), axis(1)), 1e-6)
        return T.div(m, T.sum_(m, axis=1, keepdims=True))

    # ------------------------------------------------------------ full pass

    def forward(self, image, sentence: ClassSentence, theta_con=None, theta_inc=None) -> DetectorOutput:
        enc = image if isinstance(image, EncodedImage) else self.encode_image(image)
        f_txt = self.encode_text(sentence, theta_con)
        f_img, f_txt = self.fuse(enc.features, f_txt, theta_inc)
        n_prompt = theta_con.length if theta_con is not None else 0
        return self.decode(f_img, f_txt, sentence, n_prompt)

    def detect(self, image, sentence: ClassSentence, theta_con=None, theta_inc=None) -> list[Detection]:
        with T.no_grad():
            out = self.forward(image, sentence, theta_con, theta_inc)
        return to_detections(out)


def _logit(p):
    return T.sub(T.log(p), T.log(T.sub(1.0, p)))


def to_detections(out: DetectorOutput) -> list[Detection]:
    """One detection per query: argmax class, sigmoid score, box clipped to the unit square."""
    logits = out.logits.data
    probs = 1.0 / (1.0 + np.exp(-logits))
    best = probs.argmax(axis=1)
    xyxy = np.clip(cxcywh_to_xyxy(out.boxes.data), 0.0, 1.0)
    boxes = xyxy_to_cxcywh(xyxy)
    return [Detection(tuple(float(v) for v in boxes[i]), out.names[best[i]], float(probs[i, best[i]]))
            for i in range(len(best))]
