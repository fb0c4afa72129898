"""Zero-shot detection from label embeddings.

An image embedding is compared against one reference vector per class by
cosine similarity; the attack score is the two-way softmax of the two
similarities.  Reference vectors come from a simple tab-separated file or,
for self-contained runs, from a deterministic hash-seeded toy text encoder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError
from .head import ATTACK, BONA_FIDE, LABEL_NAMES

BONA_FIDE_PROMPT = "bona-fide presentation"
ATTACK_PROMPT = "face image morphing attack"


@dataclass
class LabelEmbedding:
    label: str
    vector: np.ndarray
    prompt_text: str = ""


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ParameterError(
            f"cosine similarity needs equal lengths, got {u.shape} and {v.shape}"
        )
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ParameterError("cosine similarity is undefined for a zero vector")
    return float(u @ v / (nu * nv))


def _similarities(image, backbone, labels) -> tuple[float, float]:
    emb = backbone.encode(image).data
    bona, attack = labels
    return (cosine_similarity(emb, bona.vector),
            cosine_similarity(emb, attack.vector))


def ti_score(image, backbone, labels) -> float:
    """Attack probability: softmax over the two cosine similarities."""
    sim_b, sim_a = _similarities(image, backbone, labels)
    return _score_from_similarities(sim_b, sim_a)


def _score_from_similarities(sim_b: float, sim_a: float) -> float:
    m = max(sim_b, sim_a)
    eb, ea = np.exp(sim_b - m), np.exp(sim_a - m)
    return float(ea / (eb + ea))


def ti_predict(image, backbone, labels) -> int:
    """Nearest label by cosine similarity; a tie counts as bona fide."""
    sim_b, sim_a = _similarities(image, backbone, labels)
    return ATTACK if sim_a > sim_b else BONA_FIDE


def ti_scores(images, backbone, labels) -> np.ndarray:
    """Attack scores for a batch (B, C, H, W) in one encoder pass."""
    emb = backbone.encode(images).data
    bona, attack = labels
    vb = bona.vector / np.linalg.norm(bona.vector)
    va = attack.vector / np.linalg.norm(attack.vector)
    norms = np.linalg.norm(emb, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ParameterError("cosine similarity is undefined for a zero vector")
    unit = emb / norms
    sim_b, sim_a = unit @ vb, unit @ va
    m = np.maximum(sim_b, sim_a)
    eb, ea = np.exp(sim_b - m), np.exp(sim_a - m)
    return ea / (eb + ea)


def toy_text_embed(prompt: str, embed_dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit vector derived from a prompt string.

    A stand-in for a real text encoder: the prompt and seed are hashed to
    seed a generator, and a normal draw is L2-normalised.  Same prompt,
    same vector; different prompts, near-orthogonal vectors in high
    dimension.
    """
    if embed_dim < 1:
        raise ParameterError(f"embed_dim must be >= 1, got {embed_dim}")
    digest = hashlib.sha256(f"{seed}\x1f{prompt}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.normal(size=embed_dim)
    return v / np.linalg.norm(v)


def toy_label_embeddings(embed_dim: int, seed: int = 0):
    """The canonical prompt pair run through the toy text encoder."""
    return (
        LabelEmbedding(LABEL_NAMES[BONA_FIDE],
                       toy_text_embed(BONA_FIDE_PROMPT, embed_dim, seed),
                       BONA_FIDE_PROMPT),
        LabelEmbedding(LABEL_NAMES[ATTACK],
                       toy_text_embed(ATTACK_PROMPT, embed_dim, seed),
                       ATTACK_PROMPT),
    )


def class_mean_label_embeddings(backbone, images, labels):
    """Mean embedding per class from a labeled batch, as label references."""
    emb = backbone.encode(images).data
    labels = np.asarray(labels)
    out = []
    for idx, name in ((BONA_FIDE, LABEL_NAMES[BONA_FIDE]),
                      (ATTACK, LABEL_NAMES[ATTACK])):
        rows = emb[labels == idx]
        if rows.size == 0:
            raise ParameterError(f"no samples labelled {name}")
        out.append(LabelEmbedding(name, rows.mean(axis=0)))
    return tuple(out)


def save_label_embeddings(path, labels) -> None:
    """Write `label<TAB>dim<TAB>v1,v2,...` rows, one per label."""
    with open(path, "w", encoding="utf-8") as fh:
        for le in labels:
            vec = ",".join(repr(float(x)) for x in le.vector)
            fh.write(f"{le.label}\t{le.vector.size}\t{vec}\n")


def load_label_embeddings(path):
    """Read the label file; requires exactly the bonafide and attack rows."""
    found: dict[str, LabelEmbedding] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(
                    f"{path}:{lineno}: expected label<TAB>dim<TAB>values"
                )
            label, dim_s, values = parts
            if label not in LABEL_NAMES:
                raise FormatError(
                    f"{path}:{lineno}: unknown label {label!r}"
                )
            try:
                dim = int(dim_s)
                vec = np.array([float(v) for v in values.split(",")],
                               dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if vec.size != dim:
                raise FormatError(
                    f"{path}:{lineno}: declared dimension {dim} but found "
                    f"{vec.size} values"
                )
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                raise FormatError(f"{path}:{lineno}: zero vector")
            found[label] = LabelEmbedding(label, vec / norm)
    for name in LABEL_NAMES:
        if name not in found:
            raise FormatError(f"{path}: missing label row {name!r}")
    return (found[LABEL_NAMES[BONA_FIDE]], found[LABEL_NAMES[ATTACK]])
