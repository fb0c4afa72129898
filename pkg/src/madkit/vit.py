"""Vision transformer image encoder.

Images are cut into non-overlapping patches (row-major), linearly projected,
prefixed with a learned CLS token and summed with learned position
embeddings.  A stack of pre-norm transformer blocks follows; the final
embedding is a linear projection of the layer-normalised CLS row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class VitConfig:
    image_size: int
    patch_size: int
    channels: int
    depth: int
    width: int
    heads: int
    mlp_ratio: int
    embed_dim: int

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.width % self.heads != 0:
            raise ConfigError(
                f"width {self.width} not divisible by heads {self.heads}"
            )
        for field in ("image_size", "patch_size", "channels", "depth",
                      "width", "heads", "mlp_ratio", "embed_dim"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


VIT_B = VitConfig(image_size=224, patch_size=16, channels=3, depth=12,
                  width=768, heads=12, mlp_ratio=4, embed_dim=512)
VIT_L = VitConfig(image_size=224, patch_size=14, channels=3, depth=24,
                  width=1024, heads=16, mlp_ratio=4, embed_dim=768)
TINY = VitConfig(image_size=32, patch_size=8, channels=1, depth=4,
                 width=64, heads=4, mlp_ratio=4, embed_dim=64)

PRESETS: dict[str, VitConfig] = {"tiny": TINY, "vit_b": VIT_B, "vit_l": VIT_L}


def trunc_normal(rng: np.random.Generator, shape, std=INIT_STD, bound=2.0):
    """Normal draw with resampling outside +-bound standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > bound * std
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


class Linear:
    """Weight stored (out_features, in_features); applied as x @ W.T + b."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, T.transpose(self.weight)) + self.bias


class PatchEmbedder:
    def __init__(self, proj: Linear, cls: Tensor, pos: Tensor):
        self.proj = proj
        self.cls = cls  # (1, 1, width)
        self.pos = pos  # (1, seq_len, width)


class AttentionLayer:
    def __init__(self, wq: Linear, wk: Linear, wv: Linear, wo: Linear,
                 heads: int):
        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.wo = wo
        self.heads = heads


class TransformerBlock:
    def __init__(self, norm1, attn: AttentionLayer, norm2, fc1: Linear,
                 fc2: Linear):
        self.norm1 = norm1  # (gain, bias)
        self.attn = attn
        self.norm2 = norm2
        self.fc1 = fc1
        self.fc2 = fc2


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, num_patches, C*p*p) with row-major patch order."""
    b, c, h, w = images.shape
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, gh, gw, C, p, p)
    return x.reshape(b, gh * gw, c * patch_size * patch_size)


def _as_batch(images) -> tuple[np.ndarray, bool]:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W) images, got {arr.shape}")


def tokenize(images, embedder: PatchEmbedder, config: VitConfig) -> Tensor:
    """Patch projection + CLS prefix + position embeddings.

    Accepts one image (C,H,W) or a batch (B,C,H,W); the output keeps the
    batch axis: (B, seq_len, width).
    """
    batch, _ = _as_batch(images)
    b, c, h, w = batch.shape
    if (c, h, w) != (config.channels, config.image_size, config.image_size):
        raise ShapeError(
            f"expected images shaped ({config.channels},{config.image_size},"
            f"{config.image_size}), got ({c},{h},{w})"
        )
    patches = Tensor(extract_patches(batch, config.patch_size))
    tok = embedder.proj(patches)  # (B, P, width)
    cls = T.broadcast_to(embedder.cls, (b, 1, config.width))
    tok = T.concat([cls, tok], axis=1)
    return tok + embedder.pos


def attention_forward(tokens: Tensor, layer: AttentionLayer, lora=None,
                      training=False, rng=None) -> Tensor:
    """Multi-head scaled dot-product attention over (B, S, width) tokens.

    `lora` optionally maps projection name ("q", "v") to an adapter whose
    delta is added to the corresponding frozen projection output.
    """
    q = layer.wq(tokens)
    k = layer.wk(tokens)
    v = layer.wv(tokens)
    if lora:
        if "q" in lora and lora["q"] is not None:
            q = q + lora["q"].delta(tokens, training=training, rng=rng)
        if "v" in lora and lora["v"] is not None:
            v = v + lora["v"].delta(tokens, training=training, rng=rng)

    heads = layer.heads
    dk = q.shape[-1] // heads
    inv_sqrt_dk = 1.0 / np.sqrt(dk)
    outs = []
    for i in range(heads):
        qi = T.slice_axis(q, -1, i * dk, (i + 1) * dk)
        ki = T.slice_axis(k, -1, i * dk, (i + 1) * dk)
        vi = T.slice_axis(v, -1, i * dk, (i + 1) * dk)
        att = T.softmax(T.scale(T.matmul(qi, T.transpose(ki)), inv_sqrt_dk),
                        axis=-1)
        outs.append(T.matmul(att, vi))
    merged = T.concat(outs, axis=-1)
    return layer.wo(merged)


class VitBackbone:
    def __init__(self, config: VitConfig, embedder: PatchEmbedder,
                 blocks: list[TransformerBlock], final_norm, out_proj: Linear):
        self.config = config
        self.embedder = embedder
        self.blocks = blocks
        self.final_norm = final_norm  # (gain, bias)
        self.out_proj = out_proj

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        e = self.embedder
        out["embed.proj.weight"] = e.proj.weight
        out["embed.proj.bias"] = e.proj.bias
        out["embed.cls"] = e.cls
        out["embed.pos"] = e.pos
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}."
            out[p + "norm1.gain"], out[p + "norm1.bias"] = blk.norm1
            for nm, lin in (("wq", blk.attn.wq), ("wk", blk.attn.wk),
                            ("wv", blk.attn.wv), ("wo", blk.attn.wo)):
                out[p + f"attn.{nm}.weight"] = lin.weight
                out[p + f"attn.{nm}.bias"] = lin.bias
            out[p + "norm2.gain"], out[p + "norm2.bias"] = blk.norm2
            out[p + "mlp.fc1.weight"] = blk.fc1.weight
            out[p + "mlp.fc1.bias"] = blk.fc1.bias
            out[p + "mlp.fc2.weight"] = blk.fc2.weight
            out[p + "mlp.fc2.bias"] = blk.fc2.bias
        out["final_norm.gain"], out["final_norm.bias"] = self.final_norm
        out["out_proj.weight"] = self.out_proj.weight
        out["out_proj.bias"] = self.out_proj.bias
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())

    def freeze(self):
        for t in self.named_parameters().values():
            t.frozen = True

    def encode(self, images, training=False, rng=None, adapters=None) -> Tensor:
        """Embed one image (C,H,W) -> (embed_dim,) or a batch -> (B, embed_dim)."""
        batch, squeeze = _as_batch(images)
        tok = tokenize(batch, self.embedder, self.config)
        for i, blk in enumerate(self.blocks):
            lora = adapters[i] if adapters is not None else None
            h = T.layernorm(tok, blk.norm1[0], blk.norm1[1])
            tok = tok + attention_forward(h, blk.attn, lora=lora,
                                          training=training, rng=rng)
            h = T.layernorm(tok, blk.norm2[0], blk.norm2[1])
            h = blk.fc2(T.gelu(blk.fc1(h)))
            tok = tok + h
        tok = T.layernorm(tok, self.final_norm[0], self.final_norm[1])
        cls = T.reshape(T.slice_axis(tok, 1, 0, 1), (batch.shape[0],
                                                     self.config.width))
        emb = self.out_proj(cls)
        if squeeze:
            emb = T.reshape(emb, (self.config.embed_dim,))
        return emb


def _init_linear(rng, out_features, in_features, name) -> Linear:
    w = T.param(trunc_normal(rng, (out_features, in_features)),
                name=name + ".weight")
    b = T.param(np.zeros(out_features), name=name + ".bias")
    return Linear(w, b)


def init_random(config: VitConfig, seed: int) -> VitBackbone:
    """Fresh backbone: truncated-normal weights (std 0.02), zero biases,
    unit layer-norm gains.  Same seed, same parameters, bit for bit."""
    rng = np.random.default_rng(seed)
    d = config.width

    proj = _init_linear(rng, d, config.patch_dim, "embed.proj")
    cls = T.param(trunc_normal(rng, (1, 1, d)), name="embed.cls")
    pos = T.param(trunc_normal(rng, (1, config.seq_len, d)), name="embed.pos")
    embedder = PatchEmbedder(proj, cls, pos)

    def norm_pair(name):
        return (T.param(np.ones(d), name=name + ".gain"),
                T.param(np.zeros(d), name=name + ".bias"))

    blocks = []
    hidden = d * config.mlp_ratio
    for i in range(config.depth):
        p = f"blocks.{i}."
        attn = AttentionLayer(
            _init_linear(rng, d, d, p + "attn.wq"),
            _init_linear(rng, d, d, p + "attn.wk"),
            _init_linear(rng, d, d, p + "attn.wv"),
            _init_linear(rng, d, d, p + "attn.wo"),
            heads=config.heads,
        )
        blocks.append(TransformerBlock(
            norm_pair(p + "norm1"), attn, norm_pair(p + "norm2"),
            _init_linear(rng, hidden, d, p + "mlp.fc1"),
            _init_linear(rng, d, hidden, p + "mlp.fc2"),
        ))

    final_norm = norm_pair("final_norm")
    out_proj = _init_linear(rng, config.embed_dim, d, "out_proj")
    return VitBackbone(config, embedder, blocks, final_norm, out_proj)
