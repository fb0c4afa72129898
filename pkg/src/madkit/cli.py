"""Command line interface.

One binary, six subcommands:

    gen-data   write the synthetic morph benchmark
    train      fit a detector under a chosen regime
    eval       score a manifest with a trained detector + metrics report
    ti         zero-shot scoring against label embeddings
    merge      fold adapters into projection weights
    report     metrics report from existing score files

Options resolve in three layers: built-in defaults, then a `key=value`
config file (--config), then explicit flags; unknown config keys are
rejected.  Every run writes the fully resolved configuration next to its
outputs.  Exit codes: 0 success, 2 usage or configuration, 3 data, 4
numeric.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint as ckpt_mod
from . import data as data_mod
from . import lora as lora_mod
from . import metrics as metrics_mod
from . import plotting
from . import training as train_mod
from . import vit as vit_mod
from . import zero_shot as zs_mod
from .errors import (ConfigError, DataError, FormatError, MadkitError,
                     NumericError)
from .head import ClassifierHead
from .training import Detector, TrainConfig

PROG = "madkit"


@dataclass(frozen=True)
class Opt:
    dest: str
    typ: str  # int | float | str | bool
    default: object
    help: str
    required: bool = False
    choices: tuple | None = None


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


_CONVERTERS = {"int": int, "float": float, "str": str, "bool": _parse_bool}


def _add_opts(parser: argparse.ArgumentParser, opts: list[Opt]):
    parser.add_argument("--config", default=None, metavar="FILE",
                        help="key=value file supplying option defaults")
    for o in opts:
        flag = "--" + o.dest.replace("_", "-")
        if o.typ == "bool":
            parser.add_argument(flag, dest=o.dest, default=None,
                                action=argparse.BooleanOptionalAction,
                                help=o.help)
        else:
            parser.add_argument(flag, dest=o.dest, default=None,
                                type=_CONVERTERS[o.typ],
                                choices=o.choices, help=o.help)


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(
                        f"{path}:{lineno}: expected key=value, got {line!r}"
                    )
                key, _, value = line.partition("=")
                values[key.strip().replace("-", "_")] = value.strip()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return values


def _resolve(ns: argparse.Namespace, opts: list[Opt]) -> dict:
    known = {o.dest: o for o in opts}
    file_values: dict[str, str] = {}
    if ns.config:
        file_values = _parse_config_file(ns.config)
        unknown = sorted(set(file_values) - set(known))
        if unknown:
            raise ConfigError(
                f"{ns.config}: unknown option keys: {', '.join(unknown)}"
            )
    resolved = {}
    for o in opts:
        value = getattr(ns, o.dest)
        if value is None and o.dest in file_values:
            value = _CONVERTERS[o.typ](file_values[o.dest])
            if o.choices and value not in o.choices:
                raise ConfigError(
                    f"{o.dest} must be one of {o.choices}, got {value!r}"
                )
        if value is None:
            value = o.default
        if value is None and o.required:
            raise ConfigError(f"missing required option --"
                              f"{o.dest.replace('_', '-')}")
        resolved[o.dest] = value
    return resolved


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_resolved(out_dir: str, command: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"command={command}"]
    lines += [f"{k}={_format_value(v)}" for k, v in sorted(resolved.items())]
    with open(os.path.join(out_dir, "resolved_config.txt"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


# --------------------------------------------------------------------------
# gen-data

GEN_OPTS = [
    Opt("out", "str", None, "output directory", required=True),
    Opt("identities", "int", 64, "number of synthetic identities"),
    Opt("images_per_identity", "int", 8, "bona fide renders per identity"),
    Opt("morph_fraction", "float", 0.375,
        "fraction of each split that is morphs"),
    Opt("resolution", "int", 32, "square image resolution"),
    Opt("seed", "int", 0, "master generation seed"),
    Opt("test_fraction", "float", 0.25, "fraction of identities held out"),
]


def cmd_gen_data(ns) -> int:
    cfg = _resolve(ns, GEN_OPTS)
    summary = data_mod.gen_benchmark(
        cfg["out"], n_identities=cfg["identities"],
        images_per_identity=cfg["images_per_identity"],
        morph_fraction=cfg["morph_fraction"],
        resolution=cfg["resolution"], seed=cfg["seed"],
        test_fraction=cfg["test_fraction"])
    _write_resolved(cfg["out"], "gen-data", cfg)
    for split in ("train", "test"):
        c = summary["counts"][split]
        print(f"{split}: {c['bonafide']} bonafide + {c['morph']} morph -> "
              f"{summary['manifests'][split]}")
    return 0


# --------------------------------------------------------------------------
# train

TRAIN_OPTS = [
    Opt("data", "str", None, "path to the training manifest.csv",
        required=True),
    Opt("out", "str", None, "output directory", required=True),
    Opt("preset", "str", None, "training preset name",
        choices=tuple(sorted(train_mod.TRAIN_PRESETS))),
    Opt("regime", "str", None, "training regime",
        choices=train_mod.REGIMES),
    Opt("vit", "str", "tiny", "encoder preset",
        choices=tuple(sorted(vit_mod.PRESETS))),
    Opt("init_from", "str", None,
        "checkpoint supplying the starting backbone"),
    Opt("epochs", "int", None, "training epochs"),
    Opt("batch_size", "int", None, "minibatch size"),
    Opt("model_lr", "float", None, "backbone-side learning rate"),
    Opt("head_lr", "float", None, "head learning rate"),
    Opt("weight_decay", "float", None, "decoupled weight decay"),
    Opt("lora_r", "int", None, "adapter rank"),
    Opt("lora_alpha", "float", None, "adapter scale numerator"),
    Opt("lora_dropout", "float", None, "adapter branch dropout"),
    Opt("lora_per_head", "bool", None,
        "independent adapters per attention head"),
    Opt("flip_prob", "float", None, "horizontal flip probability"),
    Opt("seed", "int", 0, "training seed"),
    Opt("deterministic", "bool", True, "bit-reproducible mode"),
    Opt("save_every", "int", 0,
        "also checkpoint every N epochs (0 = end only)"),
    Opt("threads", "int", 1, "worker threads for evaluation passes"),
]

_TRAIN_CFG_FIELDS = ("regime", "epochs", "batch_size", "model_lr", "head_lr",
                     "weight_decay", "lora_r", "lora_alpha", "lora_dropout",
                     "lora_per_head", "flip_prob")


def _build_train_config(cfg: dict) -> TrainConfig:
    if cfg["preset"]:
        base = train_mod.TRAIN_PRESETS[cfg["preset"]]
    else:
        base = TrainConfig(regime=cfg["regime"] or "lora")
    overrides = {k: cfg[k] for k in _TRAIN_CFG_FIELDS if cfg[k] is not None}
    overrides["seed"] = cfg["seed"]
    overrides["deterministic"] = cfg["deterministic"]
    return replace(base, **overrides)


def _load_backbone(path_or_none, vit_name: str, seed: int):
    if path_or_none:
        bundle = ckpt_mod.load_model(path_or_none)
        if isinstance(bundle.backbone, lora_mod.AdaptedBackbone):
            raise ConfigError(
                "init-from expects a plain backbone checkpoint; merge the "
                "adapters first"
            )
        return bundle.backbone
    return vit_mod.init_random(vit_mod.PRESETS[vit_name], seed)


def cmd_train(ns) -> int:
    cfg = _resolve(ns, TRAIN_OPTS)
    tc = _build_train_config(cfg)
    if tc.regime == "ti":
        raise ConfigError("regime 'ti' performs no training; "
                          "use the ti command to evaluate")
    backbone = _load_backbone(cfg["init_from"], cfg["vit"], cfg["seed"])
    vit_config = backbone.config
    dataset = data_mod.load_dataset(cfg["data"], size=vit_config.image_size)

    if tc.regime == "lora":
        model = lora_mod.inject(backbone, r=tc.lora_r, alpha=tc.lora_alpha,
                                dropout_p=tc.lora_dropout,
                                seed=cfg["seed"] + 1,
                                per_head=tc.lora_per_head,
                                rank_stabilized=tc.lora_rank_stabilized)
    else:
        model = backbone
    head = ClassifierHead.init_random(vit_config.embed_dim, cfg["seed"] + 2)
    detector = Detector(model, head)

    os.makedirs(cfg["out"], exist_ok=True)
    _write_resolved(cfg["out"], "train", cfg)

    best = {"eer": np.inf, "path": os.path.join(cfg["out"], "model_best.ckpt")}
    extra = {"regime": tc.regime, "vit_preset": cfg["vit"]}

    def on_epoch(epoch: int, log: train_mod.EpochLog):
        if cfg["save_every"] and (epoch + 1) % cfg["save_every"] == 0:
            ckpt_mod.save_model(
                os.path.join(cfg["out"], f"model_epoch{epoch:03d}.ckpt"),
                detector.backbone, detector.head, extra=extra)
        if log.train_eer < best["eer"]:
            best["eer"] = log.train_eer
            ckpt_mod.save_model(best["path"], detector.backbone,
                                detector.head, extra=extra)

    logs = train_mod.train(detector, dataset, tc, on_epoch=on_epoch)

    with open(os.path.join(cfg["out"], "train_log.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(train_mod.epoch_log_csv(logs))
    last_path = os.path.join(cfg["out"], "model_last.ckpt")
    ckpt_mod.save_model(last_path, detector.backbone, detector.head,
                        extra=extra)
    final = logs[-1]
    print(f"trained {tc.regime} for {tc.epochs} epochs: "
          f"loss {final.mean_loss:.4f}, train EER {final.train_eer:.4f}")
    print(f"checkpoint: {last_path}")
    return 0


# --------------------------------------------------------------------------
# eval / ti shared reporting

def _emit_scores_and_report(out_dir: str, subsets: dict[str, metrics_mod.ScoreSet],
                            det_plot: bool = True) -> metrics_mod.Report:
    os.makedirs(out_dir, exist_ok=True)
    named_points = {}
    for name, score_set in subsets.items():
        safe = _safe_name(name)
        metrics_mod.save_score_file(
            os.path.join(out_dir, f"scores_{safe}.csv"), score_set)
        points = metrics_mod.det_curve(score_set)
        named_points[name] = points
        with open(os.path.join(out_dir, f"det_{safe}.csv"), "w",
                  encoding="utf-8", newline="\n") as fh:
            fh.write(metrics_mod.det_points_csv(points))
    report = metrics_mod.build_report(subsets)
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(report.to_csv_text())
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(report.to_json_text())
    if det_plot:
        plotting.save_det_svg(named_points,
                              os.path.join(out_dir, "det.svg"))
    return report


def _group_by_subset(scores: np.ndarray, dataset) -> dict[str, metrics_mod.ScoreSet]:
    subsets: dict[str, metrics_mod.ScoreSet] = {}
    tags = np.array(dataset.subsets)
    for tag in sorted(set(dataset.subsets)):
        mask = tags == tag
        subsets[tag] = metrics_mod.ScoreSet(scores[mask],
                                            dataset.labels[mask], name=tag)
    return subsets


def _print_report(report: metrics_mod.Report) -> None:
    for name, row in report.rows:
        print(f"{name}: EER {row['eer_pct']:.2f}%")


EVAL_OPTS = [
    Opt("checkpoint", "str", None, "trained detector checkpoint",
        required=True),
    Opt("data", "str", None, "manifest to score", required=True),
    Opt("out", "str", None, "output directory", required=True),
    Opt("batch_size", "int", 64, "evaluation batch size"),
    Opt("threads", "int", 1, "worker threads for scoring"),
    Opt("deterministic", "bool", True, "bit-reproducible mode"),
    Opt("det_plot", "bool", True, "render the DET figure"),
]


def cmd_eval(ns) -> int:
    cfg = _resolve(ns, EVAL_OPTS)
    bundle = ckpt_mod.load_model(cfg["checkpoint"])
    if bundle.head is None:
        raise ConfigError("checkpoint has no classifier head; "
                          "train one or use the ti command")
    detector = Detector(bundle.backbone, bundle.head)
    dataset = data_mod.load_dataset(cfg["data"],
                                    size=bundle.backbone.config.image_size)
    threads = 1 if cfg["deterministic"] else cfg["threads"]
    scores = train_mod.evaluate_scores(detector, dataset,
                                       batch_size=cfg["batch_size"],
                                       threads=threads)
    report = _emit_scores_and_report(cfg["out"],
                                     _group_by_subset(scores, dataset),
                                     det_plot=cfg["det_plot"])
    _write_resolved(cfg["out"], "eval", cfg)
    _print_report(report)
    return 0


TI_OPTS = [
    Opt("checkpoint", "str", None, "backbone checkpoint", required=True),
    Opt("data", "str", None, "manifest to score", required=True),
    Opt("out", "str", None, "output directory", required=True),
    Opt("labels", "str", None,
        "label embedding file (default: deterministic toy text encoder)"),
    Opt("label_seed", "int", 0, "seed for the toy text encoder"),
    Opt("batch_size", "int", 64, "evaluation batch size"),
    Opt("det_plot", "bool", True, "render the DET figure"),
]


def cmd_ti(ns) -> int:
    cfg = _resolve(ns, TI_OPTS)
    bundle = ckpt_mod.load_model(cfg["checkpoint"])
    backbone = bundle.backbone
    dataset = data_mod.load_dataset(cfg["data"],
                                    size=backbone.config.image_size)
    if cfg["labels"]:
        labels = zs_mod.load_label_embeddings(cfg["labels"])
    else:
        labels = zs_mod.toy_label_embeddings(backbone.config.embed_dim,
                                             cfg["label_seed"])
    n = len(dataset)
    scores = np.empty(n)
    bs = cfg["batch_size"]
    for start in range(0, n, bs):
        scores[start:start + bs] = zs_mod.ti_scores(
            dataset.images[start:start + bs], backbone, labels)
    report = _emit_scores_and_report(cfg["out"],
                                     _group_by_subset(scores, dataset),
                                     det_plot=cfg["det_plot"])
    _write_resolved(cfg["out"], "ti", cfg)
    _print_report(report)
    return 0


# --------------------------------------------------------------------------
# merge

MERGE_OPTS = [
    Opt("checkpoint", "str", None, "adapter-injected checkpoint",
        required=True),
    Opt("out", "str", None, "output directory", required=True),
]


def cmd_merge(ns) -> int:
    cfg = _resolve(ns, MERGE_OPTS)
    bundle = ckpt_mod.load_model(cfg["checkpoint"])
    if not isinstance(bundle.backbone, lora_mod.AdaptedBackbone):
        raise ConfigError("checkpoint carries no adapters to merge")
    merged = lora_mod.merge(bundle.backbone)
    os.makedirs(cfg["out"], exist_ok=True)
    out_path = os.path.join(cfg["out"], "merged.ckpt")
    extra = dict(bundle.meta.get("extra", {}))
    extra["merged_from"] = os.path.basename(cfg["checkpoint"])
    ckpt_mod.save_model(out_path, merged, bundle.head, extra=extra)
    _write_resolved(cfg["out"], "merge", cfg)
    print(f"merged checkpoint: {out_path}")
    return 0


# --------------------------------------------------------------------------
# report

REPORT_OPTS = [
    Opt("out", "str", None, "output directory", required=True),
    Opt("det_plot", "bool", True, "render the DET figure"),
]


def cmd_report(ns) -> int:
    cfg = _resolve(ns, REPORT_OPTS)
    if not ns.scores:
        raise ConfigError("report needs at least one score file")
    subsets: dict[str, metrics_mod.ScoreSet] = {}
    for path in ns.scores:
        name = os.path.splitext(os.path.basename(path))[0]
        if name.startswith("scores_"):
            name = name[len("scores_"):]
        if name in subsets:
            raise ConfigError(f"duplicate score set name {name!r}")
        subsets[name] = metrics_mod.load_score_file(path)
    report = _emit_scores_and_report(cfg["out"], subsets,
                                     det_plot=cfg["det_plot"])
    _write_resolved(cfg["out"], "report", cfg)
    _print_report(report)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Morphing attack detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    _add_opts(p, GEN_OPTS)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    _add_opts(p, TRAIN_OPTS)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a manifest and report metrics")
    _add_opts(p, EVAL_OPTS)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ti", help="zero-shot scoring from label embeddings")
    _add_opts(p, TI_OPTS)
    p.set_defaults(handler=cmd_ti)

    p = sub.add_parser("merge", help="fold adapters into the backbone")
    _add_opts(p, MERGE_OPTS)
    p.set_defaults(handler=cmd_merge)

    p = sub.add_parser("report", help="report metrics from score files")
    p.add_argument("scores", nargs="*", help="score files (score,label CSV)")
    _add_opts(p, REPORT_OPTS)
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.handler(ns)
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"error: usage: file not found: {exc.filename}",
              file=sys.stderr)
        return 2
    except IsADirectoryError as exc:
        print(f"error: usage: expected a file, got a directory: "
              f"{exc.filename}", file=sys.stderr)
        return 2
    except MadkitError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
