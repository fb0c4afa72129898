"""Binary detection head over image embeddings.

Class order is fixed: index 0 = bona fide, index 1 = attack.  The attack
score is the attack-class softmax probability, so larger means more
attack-like.  Ties in predict() resolve to bona fide.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .tensor import Tensor
from .vit import trunc_normal

BONA_FIDE = 0
ATTACK = 1
LABEL_NAMES = ("bonafide", "attack")

BCE_EPS = 1e-7


class ClassifierHead:
    """Linear layer (2 x embed_dim) + softmax over the two classes."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init_random(cls, embed_dim: int, seed: int) -> "ClassifierHead":
        rng = np.random.default_rng(seed)
        return cls(
            T.param(trunc_normal(rng, (2, embed_dim)), name="head.weight"),
            T.param(np.zeros(2), name="head.bias"),
        )

    def named_parameters(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def parameter_count(self) -> int:
        return self.weight.data.size + self.bias.data.size

    def logits(self, embedding: Tensor) -> Tensor:
        """(..., embed_dim) -> (..., 2)."""
        emb = T.as_tensor(embedding)
        squeeze = emb.ndim == 1
        if squeeze:
            emb = T.reshape(emb, (1, emb.shape[0]))
        out = T.matmul(emb, T.transpose(self.weight)) + self.bias
        if squeeze:
            out = T.reshape(out, (2,))
        return out

    def probabilities(self, embedding: Tensor) -> Tensor:
        return T.softmax(self.logits(embedding), axis=-1)

    def attack_scores(self, embedding: Tensor) -> Tensor:
        """Attack-class probability for a batch: (B, embed_dim) -> (B,)."""
        probs = self.probabilities(embedding)
        return T.reshape(T.slice_axis(probs, -1, ATTACK, ATTACK + 1),
                         probs.shape[:-1])

    def attack_score(self, embedding: Tensor) -> float:
        """Attack-class probability of a single embedding."""
        return float(self.probabilities(embedding).data[..., ATTACK])

    def predict(self, embedding: Tensor) -> int:
        """Arg-max class; an exact tie counts as bona fide."""
        probs = self.probabilities(embedding).data
        return ATTACK if probs[..., ATTACK] > probs[..., BONA_FIDE] \
            else BONA_FIDE


def bce_loss(y: int, y_hat: float, eps: float = BCE_EPS) -> float:
    """Binary cross entropy of one attack probability against label y."""
    if y not in (0, 1):
        raise ParameterError(f"label must be 0 or 1, got {y}")
    p = min(max(float(y_hat), eps), 1.0 - eps)
    return -(y * np.log(p) + (1 - y) * np.log(1.0 - p))


def batch_bce(attack_probs: Tensor, labels: np.ndarray,
              eps: float = BCE_EPS) -> Tensor:
    """Differentiable mean binary cross entropy over a batch.

    attack_probs: (B,) tensor of attack-class probabilities.
    labels: (B,) array of {0, 1}.
    """
    y = np.asarray(labels, dtype=np.float64)
    p = T.clamp(attack_probs, eps, 1.0 - eps)
    pos = T.mul(Tensor(y), T.log(p))
    neg_branch = T.mul(Tensor(1.0 - y), T.log(T.sub(1.0, p)))
    return T.neg(T.mean(pos + neg_branch))
