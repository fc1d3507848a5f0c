"""Command-line entry points: toydata, pretrain, gen-labels, train, eval,
compare.

Every run writes a manifest (command, resolved config, seed, config hash,
timestamp) into its output directory before any compute starts.  Exit
codes: 0 success, 1 usage/config error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import config as config_mod
from . import trainer
from .config import (ConfigError, TrainConfig, apply_ablation, apply_overrides,
                     apply_preset, config_hash, config_keys, config_to_dict,
                     load_config)
from .core import CheckpointError, DataError, NumericalAbortError
from .datasets import DatasetSpec, materialize_toy_dataset
from .evaluation import (EvalReport, compare_runs, evaluate, format_comparison,
                         format_table)

ENV_OUT = "POSEADAPT_OUT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _config_epilog() -> str:
    lines = ["config keys (override with --set key=value):"]
    for key, default, help_text in config_keys():
        suffix = f"  {help_text}" if help_text else ""
        lines.append(f"  {key} = {default!r}{suffix}")
    return "\n".join(lines)


def _add_config_args(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--preset", choices=sorted(config_mod.PRESETS),
                   help="apply a named override set before --set")


def _resolve_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "preset", None):
        cfg = apply_preset(cfg, args.preset)
    if args.config:
        cfg = apply_overrides(cfg, config_mod.parse_config_file(args.config))
    pairs = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        pairs[key.strip()] = value.strip()
    if pairs:
        cfg = apply_overrides(cfg, pairs)
    return cfg


def _out_dir(args, command: str) -> str:
    if getattr(args, "out", None):
        return args.out
    root = os.environ.get(ENV_OUT)
    if root:
        return os.path.join(root, command)
    raise ConfigError(f"--out is required (or set ${ENV_OUT})")


def _write_manifest(out_dir: str, command: str, cfg: TrainConfig | None,
                    extra: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if cfg is not None:
        manifest["config"] = config_to_dict(cfg)
        manifest["config_hash"] = config_hash(cfg)
        manifest["seed"] = cfg.train.seed
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_toydata(args) -> int:
    out = _out_dir(args, "toydata")
    _write_manifest(out, "toydata", None, {
        "n_source": args.n_source, "n_target": args.n_target,
        "n_test": args.n_test, "seed": args.seed, "size": args.size,
    })
    materialize_toy_dataset(out, args.n_source, args.n_target, args.seed,
                            size=args.size, n_test=args.n_test)
    print(f"wrote toy dataset under {out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, "pretrain")
    _write_manifest(out, "pretrain", cfg)
    ckpt = trainer.pretrain(cfg, out)
    print(f"pretrained checkpoint: {ckpt}")
    return 0


def _cmd_gen_labels(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, "gen-labels")
    _write_manifest(out, "gen-labels", cfg, {"checkpoint": args.checkpoint})
    store = trainer.generate_pseudo_labels(
        cfg, args.checkpoint, os.path.join(out, "pseudo_labels.jsonl"))
    print(f"pseudo-label store: {store}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.ablation:
        cfg = apply_ablation(cfg, args.ablation)
    out = _out_dir(args, "train")
    _write_manifest(out, "train", cfg, {
        "checkpoint": args.checkpoint, "pseudo": args.pseudo,
        "resume": args.resume, "ablation": args.ablation,
    })
    ckpt = trainer.train(cfg, args.checkpoint, args.pseudo, out,
                         resume_from=args.resume,
                         stop_after_epoch=args.stop_after_epoch)
    print(f"adapted checkpoint: {ckpt}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, "eval")
    _write_manifest(out, "eval", cfg, {
        "checkpoint": args.checkpoint, "dataset": args.dataset,
        "split": args.split, "domain": args.domain,
    })
    remap = None
    if args.remap:
        with open(args.remap) as fh:
            remap = json.load(fh)
    spec = DatasetSpec(
        os.path.join(args.dataset, args.split), args.split, args.domain,
        cfg.data.joint_count,
        config_mod.parse_group_map(cfg.data.group_map, cfg.data.joint_count),
    )
    report = evaluate(args.checkpoint, spec, alpha=cfg.eval.alpha,
                      mode=cfg.eval.mode, batch_size=cfg.eval.batch_size,
                      head=args.head, remap=remap)
    report.save(os.path.join(out, "report.json"))
    print(format_table(report))
    return 0


def _cmd_compare(args) -> int:
    a = EvalReport.load(args.report_a)
    b = EvalReport.load(args.report_b)
    delta = compare_runs(a, b)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "comparison.json"), "w") as fh:
            json.dump(delta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(format_comparison(delta))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="poseadapt",
        description="Unsupervised domain adaptation for 2D keypoint estimation",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toydata", help="materialize the procedural toy dataset")
    p.add_argument("--out", help="output root directory")
    p.add_argument("--n-source", type=int, default=500)
    p.add_argument("--n-target", type=int, default=500)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=_cmd_toydata)

    p = sub.add_parser("pretrain", help="stage 1: source-only pretraining")
    _add_config_args(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("gen-labels", help="decode pseudo labels for the target split")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_gen_labels)

    p = sub.add_parser("train", help="stage 2: adaptation with the pseudo-label curriculum")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.add_argument("--pseudo", required=True, help="pseudo-label store path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", help="resume from an epoch checkpoint")
    p.add_argument("--stop-after-epoch", type=int, default=None)
    p.add_argument("--ablation", choices=sorted(config_mod.ABLATIONS),
                   help="named component subset")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="domain directory holding train/ test/")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--domain", default="target", choices=["source", "target"])
    p.add_argument("--head", default=None, choices=[None, "refined", "mdam"])
    p.add_argument("--remap", help="JSON list: dataset joint -> checkpoint joint")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", help="per-group deltas between two eval reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalAbortError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
