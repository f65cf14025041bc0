"""Command-line surface: train, attack, eval, ablate, heatmap, regionstat.

Configuration comes from defaults, then an optional ``--config`` file
(``key=value`` lines with dotted sections), then repeatable ``--override``
flags; every run echoes the fully resolved configuration to the output
directory before doing any work. Exit codes: 0 success, 1 validation or
usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .attack import AttackConfig, attack_sweep
from .backbone import build_model
from .errors import (
    CheckpointError,
    ConfigurationError,
    DatasetError,
    InputError,
    TrainingDivergedError,
)
from .evalharness import (
    ThreatModel,
    clean_accuracy,
    evaluate_robustness,
    export_attention_heatmaps,
    key_region_activation,
)
from .pairing import PairingConfig
from .trainer import VARIANT_NAMES, TrainConfig, train, train_variants


class _Parser(argparse.ArgumentParser):
    # usage problems count as validation errors (exit 1), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="atpair", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration file (key=value lines)")
    common.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable; beats the config file)",
    )
    common.add_argument("--seed", type=int, help="override train.seed and model.seed")
    common.add_argument("--out", help="output directory (overrides output.dir)")

    sub.add_parser("train", parents=[common], help="adversarially train one model")
    sub.add_parser("ablate", parents=[common], help="train all defense variants and compare")
    p_eval = sub.add_parser("eval", parents=[common], help="robust-accuracy sweep")
    p_eval.add_argument("--checkpoint", help="defended model (overrides eval.checkpoint)")
    p_attack = sub.add_parser("attack", parents=[common], help="write adversarial examples")
    p_attack.add_argument("--checkpoint", help="attacked model (overrides eval.checkpoint)")
    p_heat = sub.add_parser("heatmap", parents=[common], help="export per-group attention heatmaps")
    p_heat.add_argument("--checkpoint", help="model checkpoint (overrides eval.checkpoint)")
    p_heat.add_argument("--image", required=True, help="input image file")
    p_heat.add_argument("--epsilon", type=float, help="attack budget (overrides heatmap.epsilon)")
    p_region = sub.add_parser(
        "regionstat", parents=[common], help="key-region attention concentration under attack"
    )
    p_region.add_argument("--checkpoint", help="model checkpoint (overrides eval.checkpoint)")
    return parser


def _resolve(args) -> tuple[dict, Path]:
    config = dataio.resolve_config(args.config, args.override)
    if getattr(args, "checkpoint", None):
        config["eval.checkpoint"] = args.checkpoint
    if args.seed is not None:
        config["train.seed"] = args.seed
        config["model.seed"] = args.seed
    if args.out:
        config["output.dir"] = args.out
    out_dir = Path(config["output.dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    dataio.atomic_write_text(out_dir / "resolved.cfg", dataio.render_config(config))
    return config, out_dir


def _train_config(config: dict) -> TrainConfig:
    return TrainConfig(
        epochs=config["train.epochs"],
        batch_size=config["train.batch_size"],
        learning_rate=config["train.learning_rate"],
        lr_schedule=config["train.lr_schedule"],
        train_attack=AttackConfig(
            epsilon=config["train.attack.epsilon"],
            step_size=config["train.attack.step_size"],
            num_iterations=config["train.attack.iterations"],
            random_start=config["train.attack.random_start"],
        ),
        pairing=PairingConfig(
            alpha=config["pairing.alpha"],
            beta=config["pairing.beta"],
            attention_layers=tuple(config["pairing.attention_layers"]),
            attention_power=config["pairing.attention_power"],
            norm_p=config["pairing.norm_p"],
            ce_target=config["pairing.ce_target"],
        ),
        seed=config["train.seed"],
        checkpoint_every=config["train.checkpoint_every"],
    )


def _load_split(config: dict, split: str) -> dataio.Dataset:
    dataset = dataio.load_dataset(config["dataset.id"], split, config["dataset.root"] or None)
    if config["eval.max_images"] > 0 and split == "test":
        dataset = dataset.subset(config["eval.max_images"])
    return dataset


def _load_defended(config: dict):
    if not config["eval.checkpoint"]:
        raise ConfigurationError("eval.checkpoint must point to a model checkpoint")
    return dataio.load_checkpoint(config["eval.checkpoint"])


def _build_from_config(config: dict, dataset) -> object:
    if dataset.num_classes != config["model.num_classes"]:
        raise ConfigurationError(
            f"model.num_classes={config['model.num_classes']} but dataset "
            f"{dataset.name!r} has {dataset.num_classes} classes"
        )
    return build_model(
        config["model.architecture"],
        config["model.num_classes"],
        config["model.seed"],
        in_channels=config["model.in_channels"],
    )


def _cmd_train(args) -> int:
    config, out_dir = _resolve(args)
    dataset = _load_split(config, "train")
    model = _build_from_config(config, dataset)
    _, log = train(model, dataset, _train_config(config), out_dir=out_dir)
    last = log.rows[-1]
    print(
        f"trained {config['model.architecture']} for {config['train.epochs']} epochs: "
        f"final total={last['total']:.4f} clean_acc={last['clean_acc']:.3f}"
    )
    print(f"checkpoint: {out_dir / 'final.ckpt'}")
    return 0


def _cmd_ablate(args) -> int:
    config, out_dir = _resolve(args)
    train_set = _load_split(config, "train")
    test_set = _load_split(config, "test")
    paths = train_variants(
        train_set,
        _train_config(config),
        out_dir,
        architecture_id=config["model.architecture"],
        model_seed=config["model.seed"],
    )
    summary = []
    for name in VARIANT_NAMES:
        model = dataio.load_checkpoint(paths[name])
        report = evaluate_robustness(
            model,
            ThreatModel("gray_box"),
            test_set,
            config["eval.epsilons"],
            config["eval.iterations"],
            config["eval.step_size"],
        )
        report.save(out_dir / name / "eval_report.csv")
        clean = clean_accuracy(model, test_set)
        for row in report.rows:
            summary.append({"variant": name, "clean": clean, **row})
        print(f"{name}: clean={clean:.3f} " + " ".join(
            f"eps={r['epsilon']}/it={r['iterations']}:{r['top1']:.3f}" for r in report.rows
        ))
    dataio.save_report(
        summary,
        out_dir / "ablation_summary.csv",
        ["variant", "clean", "mode", "epsilon", "iterations", "top1", "n"],
    )
    print(f"summary: {out_dir / 'ablation_summary.csv'}")
    return 0


def _cmd_eval(args) -> int:
    config, out_dir = _resolve(args)
    defended = _load_defended(config)
    if config["eval.mode"] == "black_box":
        if not config["eval.surrogate_checkpoint"]:
            raise ConfigurationError("black_box mode requires eval.surrogate_checkpoint")
        threat = ThreatModel("black_box", dataio.load_checkpoint(config["eval.surrogate_checkpoint"]))
    else:
        threat = ThreatModel(config["eval.mode"])
    test_set = _load_split(config, "test")
    report = evaluate_robustness(
        defended,
        threat,
        test_set,
        config["eval.epsilons"],
        config["eval.iterations"],
        config["eval.step_size"],
        seed=config["train.seed"],
    )
    report.save(out_dir / "eval_report.csv")
    for row in report.rows:
        print(
            f"{row['mode']} eps={row['epsilon']} iters={row['iterations']}: "
            f"top1={row['top1']:.4f} (n={row['n']})"
        )
    print(f"report: {out_dir / 'eval_report.csv'}")
    return 0


def _cmd_attack(args) -> int:
    config, out_dir = _resolve(args)
    model = _load_defended(config)
    test_set = _load_split(config, "test")
    cells = attack_sweep(
        model,
        test_set.batches(config["train.batch_size"]),
        config["eval.epsilons"],
        config["eval.iterations"],
        config["eval.step_size"],
    )
    for (eps, iters), batches in sorted(cells.items()):
        cell_dir = out_dir / f"eps{eps}_it{iters}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        pixels = np.concatenate([b.pixels for b in batches])
        labels = np.concatenate([b.labels for b in batches])
        np.save(cell_dir / "adv_pixels.npy", pixels)
        np.save(cell_dir / "labels.npy", labels)
        for i in range(min(8, pixels.shape[0])):
            dataio.save_image(pixels[i], cell_dir / f"preview_{i:03d}.png")
        print(f"eps={eps} iters={iters}: {pixels.shape[0]} adversarial images -> {cell_dir}")
    return 0


def _cmd_heatmap(args) -> int:
    config, out_dir = _resolve(args)
    model = _load_defended(config)
    image = dataio.load_image(args.image)
    epsilon = config["heatmap.epsilon"] if args.epsilon is None else args.epsilon
    attack = AttackConfig(
        epsilon=epsilon,
        step_size=config["heatmap.step_size"],
        num_iterations=config["heatmap.iterations"],
        random_start=False,
    )
    paths = export_attention_heatmaps(model, image, attack, out_dir)
    for path in paths:
        print(path)
    return 0


def _cmd_regionstat(args) -> int:
    config, out_dir = _resolve(args)
    model = _load_defended(config)
    test_set = _load_split(config, "test")
    if test_set.masks is None:
        test_set.masks = dataio.load_masks(
            config["dataset.id"], "test", config["dataset.root"] or None
        )
    attack = AttackConfig(
        epsilon=config["regionstat.epsilon"],
        step_size=config["regionstat.step_size"],
        num_iterations=config["regionstat.iterations"],
        random_start=False,
    )
    group = config["regionstat.group_index"]
    value = key_region_activation(model, test_set, attack, group)
    dataio.save_report(
        [
            {
                "group": group,
                "epsilon": attack.epsilon,
                "iterations": attack.num_iterations,
                "concentration": value,
                "n": len(test_set),
            }
        ],
        out_dir / "regionstat.csv",
        ["group", "epsilon", "iterations", "concentration", "n"],
    )
    print(f"key-region concentration (group {group}): {value:.4f}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "eval": _cmd_eval,
    "attack": _cmd_attack,
    "heatmap": _cmd_heatmap,
    "regionstat": _cmd_regionstat,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.subcommand](args)
    except (ConfigurationError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, TrainingDivergedError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
