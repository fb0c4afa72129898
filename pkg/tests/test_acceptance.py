"""End-to-end guarantees, one test (and one pass/fail line under -v) each:

1. analytic gradients of the detection loss match central differences
2. zero-initialised adapters are an exact identity; merging is lossless
3. rank-stabilised scale values and exact linearity in alpha
4. trainable-parameter counts match closed forms, exactly
5. metric values agree exactly with a brute-force threshold sweep
6. adapter fine-tuning beats the frozen-encoder baseline on the benchmark
7. zero-shot scoring trains nothing, ignores embedding scale, beats chance
8. the full pipeline is byte-for-byte reproducible
"""

import hashlib
import os
import time

import numpy as np
import pytest

from madkit import data as D
from madkit import head as H
from madkit import lora as L
from madkit import metrics as M
from madkit import tensor as T
from madkit import training as TR
from madkit import vit as V
from madkit import zero_shot as ZS
from madkit.checkpoint import param_checksum
from madkit.cli import main as cli_main

from . import oracles


# ------------------------------------------------------------------ helpers

def nonzero_adapters(model, seed):
    rng = np.random.default_rng(seed)
    for name, t in model.named_adapter_parameters().items():
        if name.endswith(".B"):
            t.data = rng.normal(0.0, 0.05, t.data.shape)


def detector_loss(model, head, x, labels) -> float:
    emb = model.encode(x)
    return float(H.batch_bce(head.attack_scores(emb), labels).data)


def run_regime(regime, train_set, test_set, seed):
    cfg = TR.train_preset("desk-lora" if regime == "lora" else "desk-fe",
                          seed=seed)
    backbone = V.init_random(V.TINY, seed=seed)
    if regime == "lora":
        model = L.inject(backbone, cfg.lora_r, cfg.lora_alpha,
                         cfg.lora_dropout, seed=seed + 1,
                         rank_stabilized=cfg.lora_rank_stabilized)
    else:
        model = backbone
    head = H.ClassifierHead.init_random(V.TINY.embed_dim, seed=seed + 2)
    det = TR.Detector(model, head)
    TR.train(det, train_set, cfg)
    scores = TR.evaluate_scores(det, test_set)
    return M.eer(M.ScoreSet(scores, test_set.labels))


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    """The default benchmark: seed 7, 64 identities, 8 images each."""
    out = tmp_path_factory.mktemp("bench7")
    info = D.gen_benchmark(str(out), 64, images_per_identity=8, seed=7)
    return (D.load_dataset(info["manifests"]["train"], size=32),
            D.load_dataset(info["manifests"]["test"], size=32))


# ---------------------------------------------------------------- 1: grads

def test_1_full_model_gradients_match_central_differences():
    start = time.time()
    backbone = V.init_random(V.TINY, seed=0)
    model = L.inject(backbone, r=2, alpha=4.0, dropout_p=0.0, seed=1)
    nonzero_adapters(model, seed=2)
    head = H.ClassifierHead.init_random(V.TINY.embed_dim, seed=3)
    rng = np.random.default_rng(4)
    x = rng.uniform(-1.0, 1.0, size=(2, 1, 32, 32))
    labels = np.array([0, 1])

    with T.Tape() as tape:
        emb = model.encode(x)
        loss = H.batch_bce(head.attack_scores(emb), labels)
        tape.backward(loss)

    params = dict(model.named_adapter_parameters())
    params.update(head.named_parameters())
    worst = 0.0
    for name, t in params.items():
        grad = t.grad
        assert grad is not None, name
        # probe the two strongest entries so the relative error is
        # measured where there is signal
        flat = np.argsort(np.abs(grad).ravel())[-2:]
        for idx in flat:
            pos = np.unravel_index(idx, t.data.shape)
            h = 1e-6 * max(1.0, abs(t.data[pos]))
            keep = t.data[pos]
            t.data[pos] = keep + h
            up = detector_loss(model, head, x, labels)
            t.data[pos] = keep - h
            down = detector_loss(model, head, x, labels)
            t.data[pos] = keep
            numeric = (up - down) / (2.0 * h)
            rel = abs(grad[pos] - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, rel)
            assert rel < 1e-4, (name, pos, grad[pos], numeric)
    elapsed = time.time() - start
    assert elapsed < 60.0
    print(f"PASS gradients: worst relative error {worst:.2e} "
          f"in {elapsed:.1f}s")


# ------------------------------------------------------- 2: identity/merge

def test_2_adapter_identity_and_lossless_merge():
    start = time.time()
    backbone = V.init_random(V.TINY, seed=0)
    rng = np.random.default_rng(1)
    probe = rng.uniform(-1.0, 1.0, size=(20, 1, 32, 32))
    frozen_out = backbone.encode(probe).data.copy()
    base_sum = param_checksum(backbone.named_parameters())

    model = L.inject(backbone, r=2, alpha=4.0, dropout_p=0.0, seed=2)
    assert np.array_equal(model.encode(probe).data, frozen_out)

    head = H.ClassifierHead.init_random(V.TINY.embed_dim, seed=3)
    images = rng.uniform(-1.0, 1.0, size=(8, 1, 32, 32))
    labels = np.array([0, 1] * 4)
    params = list(model.named_adapter_parameters().values()) \
        + list(head.named_parameters().values())
    opt = TR.AdamW([(params, 1e-3)], weight_decay=0.0)
    for _ in range(100):
        with T.Tape() as tape:
            loss = H.batch_bce(head.attack_scores(model.encode(images)),
                               labels)
            tape.backward(loss)
        opt.step()
        for p in params:
            p.grad = None

    merged = L.merge(model)
    gap = float(np.max(np.abs(merged.encode(probe).data
                              - model.encode(probe).data)))
    assert gap <= 1e-9
    assert param_checksum(backbone.named_parameters()) == base_sum
    elapsed = time.time() - start
    assert elapsed < 120.0
    print(f"PASS identity/merge: merge gap {gap:.2e} over 20 images, "
          f"base untouched, in {elapsed:.1f}s")


# ------------------------------------------------------------- 3: scaling

def test_3_rank_stabilized_scale_and_alpha_linearity():
    assert abs(L.gamma(4.0, 2) - 2.0 * np.sqrt(2.0)) <= 1e-12
    assert abs(L.gamma(8.0, 2) - 4.0 * np.sqrt(2.0)) <= 1e-12

    def adapted_deltas(alpha):
        backbone = V.init_random(V.TINY, seed=0)
        model = L.inject(backbone, r=2, alpha=alpha, dropout_p=0.0, seed=1)
        nonzero_adapters(model, seed=2)  # same seed: same A and B
        merged = L.merge(model).named_parameters()
        return {name: merged[name].data - t.data
                for name, t in backbone.named_parameters().items()
                if not np.array_equal(merged[name].data, t.data)}

    d4, d8 = adapted_deltas(4.0), adapted_deltas(8.0)
    assert set(d4) == set(d8)
    assert all(".attn.wq." in n or ".attn.wv." in n for n in d4)
    worst = max(float(np.max(np.abs(2.0 * d4[n] - d8[n]))) for n in d4)
    assert worst <= 1e-12
    print(f"PASS scaling: gamma closed forms exact, alpha doubling "
          f"linear to {worst:.1e} across {len(d4)} q/v weights")


# -------------------------------------------------------------- 4: counts

def test_4_trainable_parameter_counts_exact():
    cfg = V.TINY
    head_count = 2 * cfg.embed_dim + 2

    backbone = V.init_random(cfg, seed=0)
    head = H.ClassifierHead.init_random(cfg.embed_dim, seed=1)
    mp, hp = TR.build_trainable_set(TR.Detector(backbone, head), "fe")
    assert sum(t.data.size for t in mp) == 0
    assert sum(t.data.size for t in hp) == head_count == 130

    model = L.inject(V.init_random(cfg, seed=0), r=2, alpha=4.0,
                     dropout_p=0.0, seed=1)
    mp, hp = TR.build_trainable_set(TR.Detector(model, head), "lora")
    lora_count = cfg.depth * 2 * 2 * 2 * cfg.width
    assert sum(t.data.size for t in mp) == lora_count == 2048
    assert sum(t.data.size for t in hp) == head_count

    backbone = V.init_random(cfg, seed=0)
    mp, hp = TR.build_trainable_set(TR.Detector(backbone, head), "vit_fs")
    patch_dim = cfg.patch_size ** 2 * cfg.channels
    hidden = cfg.mlp_ratio * cfg.width
    per_block = (2 * cfg.width                       # norm1
                 + 4 * (cfg.width ** 2 + cfg.width)  # wq wk wv wo
                 + 2 * cfg.width                     # norm2
                 + cfg.width * hidden + hidden
                 + hidden * cfg.width + cfg.width)
    full = (patch_dim * cfg.width + cfg.width        # patch projection
            + cfg.width                              # cls
            + (1 + (cfg.image_size // cfg.patch_size) ** 2) * cfg.width
            + cfg.depth * per_block
            + 2 * cfg.width                          # final norm
            + cfg.width * cfg.embed_dim + cfg.embed_dim)
    assert sum(t.data.size for t in mp) == backbone.parameter_count() == full
    print(f"PASS counts: fe {head_count}, adapters {lora_count}, "
          f"full backbone {full}, all exact")


# ------------------------------------------------------------- 5: metrics

def test_5_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(55)
    checked = 0
    for _ in range(200):
        n = int(rng.integers(2, 1001))
        labels = np.zeros(n, dtype=np.int64)
        labels[: max(1, n // 3)] = 1
        rng.shuffle(labels)
        if labels.sum() == 0:
            labels[0] = 1
        if labels.sum() == n:
            labels[0] = 0
        scores = rng.normal(loc=labels * rng.uniform(0.0, 2.0), scale=1.0)
        if rng.random() < 0.5:
            scores = np.round(scores, 1)  # force ties
        ss = M.ScoreSet(scores, labels)
        assert M.eer(ss) == oracles.brute_force_eer(scores, labels)
        target = float(rng.uniform(0.0, 1.0))
        assert M.apcer_at_bpcer(ss, target) == \
            oracles.brute_force_apcer_at_bpcer(scores, labels, target)
        assert M.bpcer_at_apcer(ss, target) == \
            oracles.brute_force_bpcer_at_apcer(scores, labels, target)
        checked += 1

        warped = M.eer(M.ScoreSet(scores ** 3 + scores, labels))
        assert abs(warped - M.eer(ss)) <= 1e-12

    perfect = M.ScoreSet(np.array([0.1, 0.2, 0.8, 0.9]),
                         np.array([0, 0, 1, 1]))
    assert M.eer(perfect) == 0.0

    big = np.random.default_rng(56)
    ss = M.ScoreSet(big.uniform(0, 1, 10_000),
                    big.integers(0, 2, 10_000))
    assert abs(M.eer(ss) - 0.5) <= 0.05
    print(f"PASS metrics: {checked} random score sets match the "
          f"brute-force sweep exactly; warp, separation and chance hold")


# ---------------------------------------------------------- 6: end to end

def test_6_adapter_training_beats_frozen_encoder(bench):
    start = time.time()
    train_set, test_set = bench
    lora = {s: run_regime("lora", train_set, test_set, s) for s in (7, 8, 9)}
    fe = {s: run_regime("fe", train_set, test_set, s) for s in (7, 8, 9)}
    elapsed = time.time() - start

    assert lora[7] <= 0.05, lora
    assert np.mean(list(fe.values())) > np.mean(list(lora.values())), (fe,
                                                                       lora)
    assert elapsed <= 900.0
    print(f"PASS end to end: adapter EER {lora[7]:.3f} (seed 7) <= 5%, "
          f"means {np.mean(list(lora.values())):.3f} (adapter) < "
          f"{np.mean(list(fe.values())):.3f} (frozen), {elapsed:.0f}s total")


# ----------------------------------------------------------- 7: zero shot

def test_7_zero_shot_trains_nothing_and_beats_chance(bench):
    train_set, test_set = bench
    backbone = V.init_random(V.TINY, seed=0)
    before = param_checksum(backbone.named_parameters())

    toy = ZS.toy_label_embeddings(V.TINY.embed_dim, seed=0)
    scores = ZS.ti_scores(test_set.images, backbone, toy)
    assert param_checksum(backbone.named_parameters()) == before

    scaled = tuple(ZS.LabelEmbedding(l.label, 128.0 * l.vector) for l in toy)
    assert np.array_equal(ZS.ti_scores(test_set.images, backbone, scaled),
                          scores)

    means = ZS.class_mean_label_embeddings(backbone, train_set.images,
                                           train_set.labels)
    eer = M.eer(M.ScoreSet(ZS.ti_scores(test_set.images, backbone, means),
                           test_set.labels))
    assert param_checksum(backbone.named_parameters()) == before
    assert eer < 0.5
    print(f"PASS zero shot: no updates, scale-invariant, class-mean "
          f"EER {eer:.3f} < 0.5")


# ------------------------------------------------------- 8: reproducibility

def test_8_pipeline_reruns_are_byte_identical(tmp_path):
    def run(tag):
        root = tmp_path / tag
        bench = root / "bench"
        assert cli_main(["gen-data", "--out", str(bench),
                         "--identities", "8", "--images-per-identity", "2",
                         "--seed", "3"]) == 0
        assert cli_main(["train", "--data",
                         str(bench / "train" / "manifest.csv"),
                         "--out", str(root / "run"),
                         "--preset", "desk-lora", "--epochs", "2",
                         "--seed", "5"]) == 0
        assert cli_main(["eval", "--checkpoint",
                         str(root / "run" / "model_last.ckpt"),
                         "--data", str(bench / "test" / "manifest.csv"),
                         "--out", str(root / "eval")]) == 0
        assert cli_main(["report", str(root / "eval" / "scores_test.csv"),
                         "--out", str(root / "report")]) == 0
        digests = {}
        for sub in ("eval", "report"):
            for name in sorted(os.listdir(root / sub)):
                if name == "resolved_config.txt":
                    continue  # records the differing output paths
                payload = (root / sub / name).read_bytes()
                digests[f"{sub}/{name}"] = hashlib.sha256(payload).hexdigest()
        return digests

    first, second = run("first"), run("second")
    assert first == second
    assert any(n.startswith("eval/scores_") for n in first)
    assert "report/report.json" in first
    print(f"PASS reproducibility: {len(first)} artifacts byte-identical "
          f"across reruns")
