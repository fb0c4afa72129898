"""Synthetic face-like benchmark: identities, morphs, files, preprocessing.

An identity is a parameter vector drawn from fixed ranges (head ellipse
geometry, eye and mouth placement, two oriented texture bands, tones).
Rendering is closed-form numpy over a pixel grid, so the same identity and
noise seed always reproduce the same image byte for byte.

A morph blends two identities both ways at once: half the output is a
render of the blended parameter vector (a clean in-between face) and half
is the pixel blend of the two parent renders, which leaves the ghosting
artifacts real morphing pipelines are detected by.

Images are stored as binary PGM (P5, 8-bit grayscale) next to a
`path,label,subset` manifest; paths are relative to the manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .head import ATTACK, BONA_FIDE, LABEL_NAMES

NOISE_STD = 0.015

# name, low, high; identity vectors blend linearly inside these boxes.
# Linear axes (placement, tones, amplitudes) are kept narrow on purpose:
# blending two uniform draws concentrates toward mid-range, and any wide
# linear axis would hand the detector a "mid-valued face" shortcut that
# wrongly flags mid-valued bona fide identities wholesale.  Identity
# diversity lives in the band phases and angles instead, which wrap
# around, so blends of them have no tell-tale middle.  What a blend does
# destroy is band coherence: averaging decorrelated bands drops texture
# energy, and that drop is the same for every identity.
PARAM_RANGES = (
    ("cx", 0.47, 0.53),
    ("cy", 0.49, 0.57),
    ("ax", 0.25, 0.31),
    ("ay", 0.34, 0.42),
    ("tilt", -0.22, 0.22),
    ("eye_dx", 0.10, 0.16),
    ("eye_dy", 0.06, 0.13),
    ("eye_r", 0.055, 0.080),
    ("eye_depth", 0.58, 0.66),
    ("mouth_dy", 0.12, 0.20),
    ("mouth_w", 0.14, 0.22),
    ("mouth_curve", -0.7, 0.7),
    ("mouth_depth", 0.48, 0.56),
    ("band1_freq", 3.0, 6.0),
    ("band1_angle", 0.0, np.pi),
    ("band1_phase", 0.0, 2 * np.pi),
    ("band1_amp", 0.16, 0.19),
    ("band2_freq", 8.0, 12.0),
    ("band2_angle", 0.0, np.pi),
    ("band2_phase", 0.0, 2 * np.pi),
    ("band2_amp", 0.10, 0.13),
    ("skin", 0.58, 0.70),
    ("bg", 0.16, 0.28),
)

_IDX = {name: i for i, (name, _, _) in enumerate(PARAM_RANGES)}

# Morph parents must differ by at least this mean normalized distance over
# the band parameters.  The detectable signature of a pixel blend is the
# texture-energy drop from averaging decorrelated bands; parents with
# near-identical bands blend coherently, keep full energy, and would only
# add label noise.
MIN_PAIR_DISTANCE = 0.25

# (name, wrap period or None); normalizers map each component to [0, 1].
_DISTANCE_PARAMS = (
    ("band1_freq", None),
    ("band1_angle", np.pi),
    ("band1_phase", 2 * np.pi),
    ("band2_freq", None),
    ("band2_angle", np.pi),
    ("band2_phase", 2 * np.pi),
)


def pair_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean normalized band-parameter distance; angles and phases wrap."""
    a, b = np.asarray(a), np.asarray(b)
    total = 0.0
    for name, period in _DISTANCE_PARAMS:
        i = _IDX[name]
        delta = abs(a[i] - b[i])
        if period is None:
            total += delta / (PARAM_RANGES[i][2] - PARAM_RANGES[i][1])
        else:
            total += min(delta, period - delta) / (period / 2.0)
    return total / len(_DISTANCE_PARAMS)


@dataclass(frozen=True)
class SyntheticIdentity:
    seed: int
    params: np.ndarray

    @classmethod
    def from_seed(cls, seed: int) -> "SyntheticIdentity":
        rng = np.random.default_rng(seed)
        lo = np.array([r[1] for r in PARAM_RANGES])
        hi = np.array([r[2] for r in PARAM_RANGES])
        return cls(seed, lo + rng.random(len(PARAM_RANGES)) * (hi - lo))


@dataclass(frozen=True)
class MorphSpec:
    identity_a: SyntheticIdentity
    identity_b: SyntheticIdentity
    blend: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.blend < 1.0:
            raise ParameterError(
                f"blend must lie strictly inside (0, 1), got {self.blend}"
            )
        if self.identity_a.seed == self.identity_b.seed or \
                np.array_equal(self.identity_a.params,
                               self.identity_b.params):
            raise ParameterError("cannot morph an identity with itself")


def _p(params: np.ndarray, name: str) -> float:
    return params[_IDX[name]]


def _render_core(params: np.ndarray, resolution: int) -> np.ndarray:
    """Noiseless (R, R) render in [0, 1]."""
    ys, xs = np.meshgrid(np.linspace(0.0, 1.0, resolution),
                         np.linspace(0.0, 1.0, resolution), indexing="ij")
    cx, cy = _p(params, "cx"), _p(params, "cy")
    dx, dy = xs - cx, ys - cy
    ct, st = np.cos(_p(params, "tilt")), np.sin(_p(params, "tilt"))
    u = ct * dx - st * dy
    v = st * dx + ct * dy

    d = (u / _p(params, "ax")) ** 2 + (v / _p(params, "ay")) ** 2
    face = 1.0 / (1.0 + np.exp(-(1.0 - d) / 0.035))

    img = _p(params, "bg") + (_p(params, "skin") - _p(params, "bg")) * face

    for band in ("band1", "band2"):
        ang = _p(params, band + "_angle")
        wave = np.sin(2 * np.pi * _p(params, band + "_freq")
                      * (np.cos(ang) * xs + np.sin(ang) * ys)
                      + _p(params, band + "_phase"))
        img += _p(params, band + "_amp") * wave * face

    eye_r = _p(params, "eye_r")
    for sx in (-1.0, 1.0):
        ex = cx + sx * _p(params, "eye_dx")
        ey = cy - _p(params, "eye_dy")
        img -= _p(params, "eye_depth") * np.exp(
            -((xs - ex) ** 2 + (ys - ey) ** 2) / (2 * eye_r ** 2))

    mx = xs - cx
    my = ys - (cy + _p(params, "mouth_dy")
               + _p(params, "mouth_curve") * mx ** 2)
    img -= _p(params, "mouth_depth") * np.exp(
        -((mx / _p(params, "mouth_w")) ** 2 + (my / 0.030) ** 2))

    return np.clip(img, 0.0, 1.0)


def _noise(resolution: int, noise_seed: int) -> np.ndarray:
    rng = np.random.default_rng(noise_seed)
    return rng.normal(0.0, NOISE_STD, (resolution, resolution))


def render(identity: SyntheticIdentity, resolution: int,
           noise_seed: int) -> np.ndarray:
    """(1, R, R) image in [0, 1]; same arguments, same bytes."""
    img = _render_core(identity.params, resolution) + _noise(resolution,
                                                             noise_seed)
    return np.clip(img, 0.0, 1.0)[None]


def morph(spec: MorphSpec, resolution: int, noise_seed: int) -> np.ndarray:
    """Render a morph; symmetric in its arguments: morph(a, b, alpha) equals
    morph(b, a, 1 - alpha) whenever 1 - alpha is exact in floating point."""
    a, b, al = spec.identity_a, spec.identity_b, spec.blend
    blended = (1.0 - al) * a.params + al * b.params
    core_param = _render_core(blended, resolution)
    core_pixel = (1.0 - al) * _render_core(a.params, resolution) \
        + al * _render_core(b.params, resolution)
    img = 0.5 * core_param + 0.5 * core_pixel + _noise(resolution, noise_seed)
    return np.clip(img, 0.0, 1.0)[None]


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5) writer for one (H, W) uint8 array."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ParameterError(
            f"write_pgm expects a 2-d uint8 array, got {arr.dtype} "
            f"shape {arr.shape}"
        )
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (1, H, W) float array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if pixels.size != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, "
                          f"found {pixels.size}")
    return (pixels.reshape(h, w).astype(np.float64) / 255.0)[None]


def hflip(image: np.ndarray) -> np.ndarray:
    """Mirror the width axis; an involution."""
    return image[..., ::-1].copy()


def augment_flip(image: np.ndarray, rng: np.random.Generator,
                 p: float) -> np.ndarray:
    """Horizontally mirror with probability p (one rng draw either way)."""
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"flip probability must be in [0, 1], got {p}")
    return hflip(image) if rng.random() < p else image


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(C, H, W) -> (C, out_h, out_w) with half-pixel centre alignment;
    exact identity when the size already matches."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(image: np.ndarray, size: int) -> np.ndarray:
    """Centre-crop square, bilinear-resize to size, rescale [0,1] -> [-1,1]."""
    if image.ndim != 3:
        raise ParameterError(f"expected (C, H, W) image, got {image.shape}")
    c, h, w = image.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = image[:, top:top + side, left:left + side]
    img = bilinear_resize(img, size, size)
    return img * 2.0 - 1.0


@dataclass
class ImageDataset:
    """Preprocessed images ready for the encoder."""

    images: np.ndarray  # (N, C, H, W) in [-1, 1]
    labels: np.ndarray  # (N,) int, 0 bona fide / 1 attack
    subsets: list[str]
    paths: list[str]

    def __len__(self):
        return self.images.shape[0]


MANIFEST_HEADER = "path,label,subset"


def write_manifest(path, rows) -> None:
    """rows: (relative_path, label_int, subset) triples, written sorted."""
    rows = sorted(rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for rel, label, subset in rows:
            fh.write(f"{rel},{LABEL_NAMES[label]},{subset}\n")


def load_manifest(path) -> list[tuple[str, int, str]]:
    """(absolute_path, label, subset) rows; every path must resolve."""
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: expected header "
                              f"{MANIFEST_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected "
                                  f"'{MANIFEST_HEADER}' row")
            rel, label_s, subset = parts
            if label_s not in LABEL_NAMES:
                raise FormatError(f"{path}:{lineno}: unknown label "
                                  f"{label_s!r}")
            full = os.path.normpath(os.path.join(base, rel))
            if not os.path.isfile(full):
                raise DataError(f"{path}:{lineno}: image not found: {full}")
            rows.append((full, LABEL_NAMES.index(label_s), subset))
    if not rows:
        raise FormatError(f"{path}: no rows")
    return rows


def load_dataset(manifest_path, size: int | None = None) -> ImageDataset:
    rows = load_manifest(manifest_path)
    images, labels, subsets, paths = [], [], [], []
    for full, label, subset in rows:
        img = read_pgm(full)
        if size is not None:
            img = preprocess(img, size)
        images.append(img)
        labels.append(label)
        subsets.append(subset)
        paths.append(full)
    return ImageDataset(np.stack(images), np.array(labels, dtype=np.int64),
                        subsets, paths)


def gen_benchmark(out_dir, n_identities: int, images_per_identity: int = 8,
                  morph_fraction: float = 0.375, resolution: int = 32,
                  seed: int = 0, test_fraction: float = 0.25,
                  alpha_range: tuple[float, float] = (0.4, 0.6)) -> dict:
    """Generate the train/test benchmark tree and manifests.

    Identities are split disjointly between train and test.  Each split gets
    images_per_identity bona fide renders per identity plus enough morphs of
    within-split identity pairs that morphs make up morph_fraction of the
    split.  Reruns with the same arguments reproduce every byte.
    """
    if n_identities < 4:
        raise ParameterError("need at least 4 identities to split and morph")
    if not 0.0 < morph_fraction < 1.0:
        raise ParameterError("morph_fraction must lie in (0, 1)")
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError("test_fraction must lie in (0, 1)")
    if images_per_identity < 1:
        raise ParameterError("images_per_identity must be >= 1")

    master = np.random.default_rng(seed)
    order = master.permutation(n_identities)
    n_test = max(2, int(round(n_identities * test_fraction)))
    if n_test > n_identities - 2:
        raise ParameterError("test split would leave fewer than 2 train "
                             "identities")
    split_ids = {"test": np.sort(order[:n_test]),
                 "train": np.sort(order[n_test:])}

    identities = {i: SyntheticIdentity.from_seed(seed * 1_000_003 + i)
                  for i in range(n_identities)}

    counts = {}
    manifests = {}
    for split_index, split in enumerate(("train", "test")):
        ids = split_ids[split]
        split_dir = os.path.join(out_dir, split)
        os.makedirs(os.path.join(split_dir, "bonafide"), exist_ok=True)
        os.makedirs(os.path.join(split_dir, "morph"), exist_ok=True)
        rows = []

        for i in ids:
            for j in range(images_per_identity):
                noise_seed = (seed * 1_000_003 + i) * 1024 + j
                img = render(identities[i], resolution, noise_seed)
                rel = f"bonafide/bonafide_{i:04d}_{j:02d}.pgm"
                write_pgm(os.path.join(split_dir, rel), to_uint8(img[0]))
                rows.append((rel, BONA_FIDE, split))

        n_bona = len(ids) * images_per_identity
        n_morph = int(round(n_bona * morph_fraction / (1.0 - morph_fraction)))
        pair_rng = np.random.default_rng([seed, split_index, 0xB1E2D])
        for k in range(n_morph):
            # rejection-sample distinct parents; fall back to the farthest
            # candidate seen so a split of near-twins still terminates
            best = None
            for _ in range(64):
                ia, ib = pair_rng.choice(ids, size=2, replace=False)
                dist = pair_distance(identities[ia].params,
                                     identities[ib].params)
                if best is None or dist > best[0]:
                    best = (dist, ia, ib)
                if dist >= MIN_PAIR_DISTANCE:
                    break
            _, ia, ib = best
            alpha = float(pair_rng.uniform(*alpha_range))
            noise_seed = int(pair_rng.integers(0, 2**62))
            img = morph(MorphSpec(identities[ia], identities[ib], alpha),
                        resolution, noise_seed)
            rel = f"morph/morph_{k:04d}_{ia:04d}_{ib:04d}.pgm"
            write_pgm(os.path.join(split_dir, rel), to_uint8(img[0]))
            rows.append((rel, ATTACK, split))

        manifest_path = os.path.join(split_dir, "manifest.csv")
        write_manifest(manifest_path, rows)
        manifests[split] = manifest_path
        counts[split] = {"bonafide": n_bona, "morph": n_morph}

    return {"manifests": manifests, "counts": counts,
            "identities": {s: [int(i) for i in ids]
                           for s, ids in split_ids.items()}}
