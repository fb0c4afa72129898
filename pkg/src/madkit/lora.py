"""Rank-stabilised low-rank adapters for the attention q/v projections.

A frozen projection W0 (out x in) gains a trainable low-rank branch:

    y = W0 x + gamma * B (A dropout(x))

with A (r x in) initialised truncated-normal, B (out x r) initialised to
zero so injection starts as an exact identity, and gamma = alpha / sqrt(r).
The classical alpha / r scaling stays available behind a flag for
comparisons.  Only q and v projections are ever adapted; k, the output
projection and the MLP stay untouched.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import vit
from .errors import ParameterError, StateError
from .tensor import Tensor
from .vit import VitBackbone

ADAPTED_PROJECTIONS = ("q", "v")


def gamma(alpha: float, r: int, rank_stabilized: bool = True) -> float:
    """Adapter scale: alpha / sqrt(r), or alpha / r with the flag off."""
    if r < 1:
        raise ParameterError(f"rank must be >= 1, got {r}")
    if rank_stabilized:
        return alpha / float(np.sqrt(r))
    return alpha / float(r)


class LoraPair:
    """One (A, B) factor pair attached to a frozen projection."""

    def __init__(self, a: Tensor, b: Tensor, r: int, alpha: float,
                 dropout_p: float, rank_stabilized: bool = True):
        self.a = a  # (r, in_features)
        self.b = b  # (out_features, r)
        self.r = r
        self.alpha = alpha
        self.dropout_p = dropout_p
        self.rank_stabilized = rank_stabilized

    @property
    def gamma(self) -> float:
        return gamma(self.alpha, self.r, self.rank_stabilized)

    def delta_matrix(self) -> np.ndarray:
        """The dense update gamma * B A this pair contributes."""
        return self.gamma * (self.b.data @ self.a.data)


def lora_forward(x: Tensor, w0: Tensor, pair: LoraPair, training=False,
                 rng=None) -> Tensor:
    """x @ W0.T plus the scaled low-rank branch (dropout on the branch input)."""
    base = T.matmul(x, T.transpose(w0))
    return base + _pair_delta(x, pair, training, rng)


def _pair_delta(x: Tensor, pair: LoraPair, training, rng) -> Tensor:
    h = T.dropout(x, pair.dropout_p, training, rng)
    h = T.matmul(h, T.transpose(pair.a))
    h = T.matmul(h, T.transpose(pair.b))
    return T.scale(h, pair.gamma)


class ProjectionAdapter:
    """Adapter for one projection: a single composite pair, or one pair per
    attention head (heads partition the projection's output rows)."""

    def __init__(self, pairs: list[LoraPair], heads: int, per_head: bool):
        self.pairs = pairs
        self.heads = heads
        self.per_head = per_head

    def delta(self, x: Tensor, training=False, rng=None) -> Tensor:
        if not self.per_head:
            return _pair_delta(x, self.pairs[0], training, rng)
        parts = [_pair_delta(x, p, training, rng) for p in self.pairs]
        return T.concat(parts, axis=-1)

    def delta_matrix(self) -> np.ndarray:
        if not self.per_head:
            return self.pairs[0].delta_matrix()
        return np.concatenate([p.delta_matrix() for p in self.pairs], axis=0)

    def per_head_view(self):
        """Read-only (A_i, B_i) factor slices for each head."""
        if self.per_head:
            return [(p.a.data.copy(), p.b.data.copy()) for p in self.pairs]
        pair = self.pairs[0]
        rows = pair.b.data.shape[0] // self.heads
        return [(pair.a.data.copy(),
                 pair.b.data[i * rows:(i + 1) * rows].copy())
                for i in range(self.heads)]


class AdaptedBackbone:
    """A frozen backbone plus q/v adapters on every block."""

    def __init__(self, base: VitBackbone, adapters, r, alpha, dropout_p,
                 per_head, rank_stabilized=True):
        self.base = base
        self.adapters = adapters  # list over blocks of {"q": ..., "v": ...}
        self.r = r
        self.alpha = alpha
        self.dropout_p = dropout_p
        self.per_head = per_head
        self.rank_stabilized = rank_stabilized

    @property
    def config(self):
        return self.base.config

    def encode(self, images, training=False, rng=None) -> Tensor:
        return self.base.encode(images, training=training, rng=rng,
                                adapters=self.adapters)

    def named_adapter_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block_adapters in enumerate(self.adapters):
            for proj in ADAPTED_PROJECTIONS:
                adapter = block_adapters[proj]
                for j, pair in enumerate(adapter.pairs):
                    stem = f"blocks.{i}.{proj}"
                    if adapter.per_head:
                        stem += f".h{j}"
                    out[stem + ".A"] = pair.a
                    out[stem + ".B"] = pair.b
        return out

    def adapter_parameter_count(self) -> int:
        return sum(t.data.size
                   for t in self.named_adapter_parameters().values())


def inject(backbone: VitBackbone, r: int, alpha: float, dropout_p: float,
           seed: int, per_head: bool = False,
           rank_stabilized: bool = True) -> AdaptedBackbone:
    """Freeze the backbone and attach fresh adapters to every q and v.

    A is truncated-normal (std 0.02), B is zero, so the adapted model is an
    exact identity of the original until training moves B.
    """
    if isinstance(backbone, AdaptedBackbone):
        raise StateError("backbone already carries adapters")
    cfg = backbone.config
    d = cfg.width
    if r < 1:
        raise ParameterError(f"rank must be >= 1, got {r}")
    limit = cfg.head_dim if per_head else d
    if r >= limit:
        raise ParameterError(
            f"rank {r} must be smaller than the projection dimension {limit}"
        )
    if not 0.0 <= dropout_p < 1.0:
        raise ParameterError(
            f"dropout probability must be in [0, 1), got {dropout_p}"
        )

    backbone.freeze()
    rng = np.random.default_rng(seed)
    adapters = []
    for i in range(cfg.depth):
        block_adapters = {}
        for proj in ADAPTED_PROJECTIONS:
            if per_head:
                pairs = []
                rows = cfg.head_dim
                for j in range(cfg.heads):
                    a = T.param(vit.trunc_normal(rng, (r, d)),
                                name=f"lora.blocks.{i}.{proj}.h{j}.A")
                    b = T.param(np.zeros((rows, r)),
                                name=f"lora.blocks.{i}.{proj}.h{j}.B")
                    pairs.append(LoraPair(a, b, r, alpha, dropout_p,
                                          rank_stabilized))
            else:
                a = T.param(vit.trunc_normal(rng, (r, d)),
                            name=f"lora.blocks.{i}.{proj}.A")
                b = T.param(np.zeros((d, r)),
                            name=f"lora.blocks.{i}.{proj}.B")
                pairs = [LoraPair(a, b, r, alpha, dropout_p, rank_stabilized)]
            block_adapters[proj] = ProjectionAdapter(pairs, cfg.heads,
                                                     per_head)
        adapters.append(block_adapters)
    return AdaptedBackbone(backbone, adapters, r, alpha, dropout_p, per_head,
                           rank_stabilized)


def merge(adapted: AdaptedBackbone) -> VitBackbone:
    """Fold every adapter into its projection: W = W0 + gamma * B A.

    Returns a plain backbone with no adapter state; all parameters are
    fresh copies, unfrozen.
    """
    if not isinstance(adapted, AdaptedBackbone):
        raise StateError("merge expects an adapted backbone")
    source = adapted.base
    merged = _clone_backbone(source)
    for i, blk in enumerate(merged.blocks):
        block_adapters = adapted.adapters[i]
        blk.attn.wq.weight.data += block_adapters["q"].delta_matrix()
        blk.attn.wv.weight.data += block_adapters["v"].delta_matrix()
    return merged


def _clone_backbone(src: VitBackbone) -> VitBackbone:
    fresh = vit.init_random(src.config, seed=0)
    src_params = src.named_parameters()
    for name, t in fresh.named_parameters().items():
        t.data = src_params[name].data.copy()
        t.frozen = False
    return fresh
