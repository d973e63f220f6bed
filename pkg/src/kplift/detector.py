"""Query-based 2D keypoint extractor for small raster images.

A patch embedding with fixed sinusoidal 2D positional encodings feeds a
stack of attention blocks in which learned keypoint queries plus one context
query self-attend and then cross-attend to the patch grid. Per keypoint
query the network emits a sigmoid-bounded location in [0,1]^2 and type
logits; the context query emits a context vector and category logits.

No positional encoding is attached to the queries themselves, so keypoint
queries are exchangeable (outputs permute with them), and there is no
dropout: detection is a pure function of (parameters, image).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class ImageRaster:
    """Grayscale image, values in [0,1], row-major (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class DetectionOutput:
    deltas: Tensor  # (Q, 2) in [0,1]
    type_logits: Tensor  # (Q, K)
    context: Tensor  # (n_context,)
    category_logits: Tensor  # (|Z|,)


def positional_encoding_2d(rows, cols, dim):
    """Fixed sinusoidal encodings for a rows x cols grid, one row per cell
    (row-major), split half/half between the two axes."""
    if dim % 4 != 0:
        raise ValueError("positional encoding dim must be divisible by 4")
    half = dim // 2
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))

    def encode(pos):
        ang = pos[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    row_enc = encode(np.arange(rows, dtype=np.float64))  # (rows, half)
    col_enc = encode(np.arange(cols, dtype=np.float64))  # (cols, half)
    out = np.zeros((rows * cols, dim))
    for r in range(rows):
        out[r * cols : (r + 1) * cols, :half] = row_enc[r]
        out[r * cols : (r + 1) * cols, half:] = col_enc
    return out


def _glorot(rng, fan_in, fan_out):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.standard_normal((fan_in, fan_out)) * std


class Detector:
    """Toy-scale set detector: Q = n_types + spare keypoint queries and one
    context query over an (image_size/patch)^2 feature grid."""

    def __init__(
        self,
        n_types,
        n_categories,
        rng,
        dim=64,
        heads=4,
        blocks=2,
        patch=8,
        n_context=64,
        spare_queries=4,
        ffn_dim=128,
    ):
        if dim % heads != 0:
            raise ValueError("model dim must divide evenly into heads")
        self.n_types = n_types
        self.n_categories = n_categories
        self.dim = dim
        self.heads = heads
        self.blocks = blocks
        self.patch = patch
        self.n_context = n_context
        self.n_queries = n_types + spare_queries
        self.params = {}

        def par(name, arr):
            t = Tensor(arr, requires_grad=True)
            self.params[name] = t
            return t

        p2 = patch * patch
        par("det.embed.w", _glorot(rng, p2, dim))
        par("det.embed.b", np.zeros(dim))
        par("det.queries.kp", rng.standard_normal((self.n_queries, dim)))
        par("det.queries.ctx", rng.standard_normal((1, dim)))
        par("det.ln_mem.g", np.ones(dim))
        par("det.ln_mem.b", np.zeros(dim))
        for i in range(blocks):
            for att in ("self", "cross"):
                for w in ("wq", "wk", "wv", "wo"):
                    par(f"det.b{i}.{att}.{w}", _glorot(rng, dim, dim))
                for b in ("bq", "bk", "bv", "bo"):
                    par(f"det.b{i}.{att}.{b}", np.zeros(dim))
            for j in (1, 2, 3):
                par(f"det.b{i}.ln{j}.g", np.ones(dim))
                par(f"det.b{i}.ln{j}.b", np.zeros(dim))
            par(f"det.b{i}.ffn.w1", _glorot(rng, dim, ffn_dim))
            par(f"det.b{i}.ffn.b1", np.zeros(ffn_dim))
            par(f"det.b{i}.ffn.w2", _glorot(rng, ffn_dim, dim))
            par(f"det.b{i}.ffn.b2", np.zeros(dim))
        par("det.head.loc.w1", _glorot(rng, dim, dim))
        par("det.head.loc.b1", np.zeros(dim))
        par("det.head.loc.w2", _glorot(rng, dim, 2))
        par("det.head.loc.b2", np.zeros(2))
        par("det.head.type.w", _glorot(rng, dim, n_types))
        par("det.head.type.b", np.zeros(n_types))
        par("det.head.ctx.w", _glorot(rng, dim, n_context))
        par("det.head.ctx.b", np.zeros(n_context))
        par("det.head.cat.w", _glorot(rng, dim, n_categories))
        par("det.head.cat.b", np.zeros(n_categories))

    def param_dict(self):
        return dict(self.params)

    def set_param(self, name, tensor):
        if name not in self.params:
            raise KeyError(f"unknown detector parameter {name!r}")
        self.params[name] = tensor

    # -- building blocks -------------------------------------------------

    def _ln(self, x, prefix):
        g = self.params[prefix + ".g"]
        b = self.params[prefix + ".b"]
        mu = ad.tmean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = ad.tmean(centered * centered, axis=-1, keepdims=True)
        return centered / ad.sqrt(var + 1e-5) * g + b

    def _mha(self, xq, xkv, prefix):
        p = self.params
        q = ad.matmul(xq, p[prefix + ".wq"]) + p[prefix + ".bq"]
        k = ad.matmul(xkv, p[prefix + ".wk"]) + p[prefix + ".bk"]
        v = ad.matmul(xkv, p[prefix + ".wv"]) + p[prefix + ".bv"]
        dh = self.dim // self.heads
        outs = []
        for h in range(self.heads):
            sl = slice(h * dh, (h + 1) * dh)
            outs.append(
                ad.scaled_dot_product_attention(q[:, sl], k[:, sl], v[:, sl])
            )
        merged = ad.concatenate(outs, axis=1)
        return ad.matmul(merged, p[prefix + ".wo"]) + p[prefix + ".bo"]

    def embed_grid(self, image):
        """Patchify the image and embed each patch, adding 2D positional
        encodings; returns (cells, dim)."""
        px = image.pixels
        h, w = px.shape
        p = self.patch
        if h % p != 0 or w % p != 0:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        gr, gc = h // p, w // p
        patches = px.reshape(gr, p, gc, p).transpose(0, 2, 1, 3).reshape(gr * gc, p * p)
        pos = positional_encoding_2d(gr, gc, self.dim)
        emb = ad.matmul(Tensor(patches), self.params["det.embed.w"])
        return emb + self.params["det.embed.b"] + Tensor(pos)

    def detect(self, image):
        """Full forward pass on one image."""
        p = self.params
        mem = self._ln(self.embed_grid(image), "det.ln_mem")
        tokens = ad.concatenate([p["det.queries.kp"], p["det.queries.ctx"]], axis=0)
        for i in range(self.blocks):
            h = self._ln(tokens, f"det.b{i}.ln1")
            tokens = tokens + self._mha(h, h, f"det.b{i}.self")
            h = self._ln(tokens, f"det.b{i}.ln2")
            tokens = tokens + self._mha(h, mem, f"det.b{i}.cross")
            h = self._ln(tokens, f"det.b{i}.ln3")
            ff = ad.matmul(ad.relu(ad.matmul(h, p[f"det.b{i}.ffn.w1"]) + p[f"det.b{i}.ffn.b1"]),
                           p[f"det.b{i}.ffn.w2"]) + p[f"det.b{i}.ffn.b2"]
            tokens = tokens + ff
        kp = tokens[0 : self.n_queries, :]
        ctx = tokens[self.n_queries : self.n_queries + 1, :]
        hidden = ad.relu(ad.matmul(kp, p["det.head.loc.w1"]) + p["det.head.loc.b1"])
        deltas = ad.sigmoid(ad.matmul(hidden, p["det.head.loc.w2"]) + p["det.head.loc.b2"])
        type_logits = ad.matmul(kp, p["det.head.type.w"]) + p["det.head.type.b"]
        context = ad.reshape(
            ad.matmul(ctx, p["det.head.ctx.w"]) + p["det.head.ctx.b"], (self.n_context,)
        )
        category_logits = ad.reshape(
            ad.matmul(ctx, p["det.head.cat.w"]) + p["det.head.cat.b"], (self.n_categories,)
        )
        return DetectionOutput(deltas, type_logits, context, category_logits)


def select_keypoints(det, registry):
    """Evaluation-time readout: argmax category, then for each keypoint type
    of that category the query whose type probability is highest (lowest
    query index wins exact ties). Returns (category_id, stacked 2xk points
    in image units, per-keypoint confidence); all selected keypoints are
    treated as visible."""
    cat_id = int(np.argmax(det.category_logits.data))
    schema = registry.schema(cat_id)
    probs = np.asarray(
        np.exp(det.type_logits.data - det.type_logits.data.max(axis=1, keepdims=True))
    )
    probs /= probs.sum(axis=1, keepdims=True)
    k = registry.total_keypoints
    stacked = np.zeros((2, k))
    confidence = np.zeros(schema.keypoint_count)
    deltas = det.deltas.data
    for t in range(schema.keypoint_count):
        q = int(np.argmax(probs[:, t]))
        stacked[:, schema.block_offset + t] = deltas[q]
        confidence[t] = probs[q, t]
    return cat_id, stacked, confidence
