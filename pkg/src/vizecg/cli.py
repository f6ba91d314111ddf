"""Command line interface.

.. code-block::

    vizecg [--config FILE] [-e KEY=VALUE ...] [--loglevel LEVEL] COMMAND ...

    gen-data   generate a synthetic dataset file
    render     render dataset records or a CSV recording into PGM images
    train      train a model and write a checkpoint with its training log
    eval       score a checkpoint in signal or image inference mode
    infer      print class probabilities for one PGM image
    gradcheck  run the finite-difference gradient check suite
    ablate     train the attention-module ablations and report median macro F1
    rerun      repeat a command from its run manifest

Settings precedence is command line flags > config file > defaults. Every command writing files also writes
`<output>.manifest.json` with the resolved config, from which `vizecg rerun` reproduces the outputs.
Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""

import argparse
import csv
import json
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, NoReturn

import uvlog

import vizecg
from vizecg.bases import Logger
from vizecg.configurator import Configurator, ProjectConfig, Settings, parse_env_flags
from vizecg.data import CLASS_NAMES, Dataset, generate_dataset, import_csv, load_dataset, save_dataset
from vizecg.errors import (
    ConfigurationError,
    DimensionError,
    Error,
    FileError,
    GradcheckFailed,
    UsageError,
    wrap_exception,
)
from vizecg.gradcheck import run_suite
from vizecg.model import forward_infer, init_model, load_model, save_model
from vizecg.raster import read_pgm, write_pgm
from vizecg.tensor import no_grad
from vizecg.train import evaluate, fit, prepare_inputs, run_ablation

__all__ = [
    "main",
    "create_parser",
    "RunContext",
    "cmd_gen_data",
    "cmd_render",
    "cmd_train",
    "cmd_eval",
    "cmd_infer",
    "cmd_gradcheck",
    "cmd_ablate",
    "cmd_rerun",
]


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}", usage=self.format_usage())


@dataclass
class RunContext:
    """State of one command run."""

    args: argparse.Namespace
    config: ProjectConfig
    settings: Settings
    logger: Logger
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    manifest_for: str | None = None  #: the primary output, the manifest is written beside it
    seed: int | None = None  #: seed the outputs depend on, recorded in the manifest


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return number


def _size(value: str) -> tuple[int, int]:
    """Parse `WIDTHxHEIGHT`.

    >>> _size('256x128')
    (256, 128)
    """
    width, sep, height = value.lower().partition("x")
    if not sep or not width.isdigit() or not height.isdigit():
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {value}")
    return int(width), int(height)


def _on_off(value: str) -> bool:
    if value.lower() not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value}")
    return value.lower() == "on"


def _prevalence(value: str) -> tuple[str, float]:
    name, sep, probability = value.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected CLASS=PROBABILITY, got {value}")
    try:
        return name, float(probability)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid probability in {value}") from None


# command line flag -> (config section, key)
OVERRIDES: dict[str, tuple[str, str]] = {
    "length": ("data", "length"),
    "co_occurrence": ("data", "co_occurrence"),
    "noise": ("data", "noise_mv"),
    "grid": ("render", "draw_grid"),
    "thickness": ("render", "thickness"),
    "preset": ("model", "preset"),
    "channels": ("model", "channels"),
    "tokens": ("model", "tokens"),
    "scale_attention": ("model", "scale_attention"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr_max": ("train", "lr_max"),
    "lr_min": ("train", "lr_min"),
    "lambda1": ("train", "lambda1"),
    "lambda2": ("train", "lambda2"),
    "train_seed": ("train", "seed"),
    "teacher_detach": ("train", "kd_teacher_detach"),
    "enable_cmam": ("train", "enable_cmam"),
    "enable_smam": ("train", "enable_smam"),
    "threshold": ("train", "threshold"),
    "check_finite": ("train", "check_finite"),
}


def _collect_overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for dest, (section, key) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    if getattr(args, "prevalence", None):
        overrides.setdefault("data", {})["prevalence"] = {name: value for name, value in args.prevalence}
    if getattr(args, "size", None):
        width, height = args.size
        overrides.setdefault("model", {}).update(image_width=width, image_height=height)
    return overrides


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--preset", choices=["desk", "tiny", "paper"], default=None, help="architecture preset")
    group.add_argument("--channels", type=_positive_int, default=None, help="feature channels C")
    group.add_argument("--tokens", type=_positive_int, default=None, help="tokens per stream L")
    group.add_argument("--size", type=_size, default=None, metavar="WxH", help="image size")
    group.add_argument("--scale-attention", action="store_true", default=None, help="scale attention logits")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--epochs", type=int, default=None)
    group.add_argument("--batch-size", type=_positive_int, default=None)
    group.add_argument("--lr-max", type=float, default=None)
    group.add_argument("--lr-min", type=float, default=None)
    group.add_argument("--lambda1", type=float, default=None, help="classification loss weight")
    group.add_argument("--lambda2", type=float, default=None, help="distillation loss weight, 0 disables KD")
    group.add_argument("--teacher-detach", action="store_true", default=None, help="no KD gradient into signals")
    group.add_argument("--check-finite", action="store_true", default=None, help="assert finite op outputs")
    group.add_argument("--split-seed", type=int, default=0, help="dataset split seed")
    group.add_argument("--grid", type=_on_off, default=None, metavar="on|off", help="draw the paper grid")


def create_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="vizecg", description="Multi-modal ECG classification with image-only inference.")
    parser.add_argument("--version", action="version", version=vizecg.__version__)
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument(
        "-e",
        "--env",
        dest="env",
        default=[],
        metavar="KEY=VALUE",
        action="append",
        help="config template value (may be used multiple times)",
    )
    parser.add_argument("--loglevel", default=None, help="log level of the vizecg logger")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    gen = commands.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--n", type=_positive_int, required=True, help="number of records")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--length", type=_positive_int, default=None, help="samples per lead")
    gen.add_argument("--prevalence", type=_prevalence, action="append", default=[], metavar="CLASS=P")
    gen.add_argument("--co-occurrence", type=float, default=None)
    gen.add_argument("--noise", type=float, default=None, help="noise amplitude, mV")
    gen.set_defaults(handler=cmd_gen_data)

    render = commands.add_parser("render", help="render records into PGM images")
    render.add_argument("--input", required=True, help="dataset (.vzec) or CSV file")
    render.add_argument("--out", required=True, help="output directory")
    render.add_argument("--index", type=int, action="append", default=None, help="record index (repeatable)")
    render.add_argument("--grid", type=_on_off, default=None, metavar="on|off")
    render.add_argument("--size", type=_size, default=None, metavar="WxH")
    render.add_argument("--thickness", type=_positive_int, default=None)
    render.set_defaults(handler=cmd_render)

    train = commands.add_parser("train", help="train a model")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True, help="checkpoint path")
    train.add_argument("--log", default=None, help="training log path, <out>.log.jsonl by default")
    train.add_argument("--seed", dest="train_seed", type=int, default=None)
    train.add_argument("--no-cmam", dest="enable_cmam", action="store_false", default=None)
    train.add_argument("--no-smam", dest="enable_smam", action="store_false", default=None)
    _add_model_flags(train)
    _add_train_flags(train)
    train.set_defaults(handler=cmd_train)

    evaluate_ = commands.add_parser("eval", help="evaluate a checkpoint")
    evaluate_.add_argument("--model", required=True, help="checkpoint path")
    evaluate_.add_argument("--data", required=True)
    evaluate_.add_argument("--mode", choices=["signal", "image"], default="image")
    evaluate_.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    evaluate_.add_argument("--split-seed", type=int, default=0)
    evaluate_.add_argument("--threshold", type=float, default=None)
    evaluate_.add_argument("--out", default=None, help="metrics CSV path")
    _add_model_flags(evaluate_)
    evaluate_.set_defaults(handler=cmd_eval)

    infer = commands.add_parser("infer", help="predict from a PGM image")
    infer.add_argument("--model", required=True, help="checkpoint path")
    infer.add_argument("--image", required=True, help="PGM image")
    infer.add_argument("--threshold", type=float, default=None, help="also print positive classes")
    infer.set_defaults(handler=cmd_infer)

    grad = commands.add_parser("gradcheck", help="run the gradient check suite")
    grad.add_argument("--seeds", type=_positive_int, default=10)
    grad.add_argument("--step", type=float, default=1e-6)
    grad.add_argument("--tol", type=float, default=1e-6, help="per-op tolerance")
    grad.add_argument("--model-tol", type=float, default=1e-4, help="end-to-end model tolerance")
    grad.add_argument("--out", default=None, help="JSON report path")
    grad.set_defaults(handler=cmd_gradcheck)

    ablate = commands.add_parser("ablate", help="attention module ablation sweep")
    ablate.add_argument("--data", required=True)
    ablate.add_argument("--seeds", type=_positive_int, default=3, help="number of seeds")
    ablate.add_argument("--out", required=True, help="median table CSV path")
    ablate.add_argument("--raw", default=None, help="per-seed results CSV path")
    _add_model_flags(ablate)
    _add_train_flags(ablate)
    ablate.set_defaults(handler=cmd_ablate)

    rerun = commands.add_parser("rerun", help="repeat a command from its manifest")
    rerun.add_argument("manifest")
    rerun.set_defaults(handler=cmd_rerun)
    return parser


def _input_path(ctx: RunContext, path: str) -> Path:
    if not Path(path).is_file():
        raise FileError(f"Input file not found: {path}\n\nFix: Check the path.", path=path)
    ctx.inputs.append(path)
    return Path(path)


def _load_dataset(ctx: RunContext, path: str) -> Dataset:
    return load_dataset(_input_path(ctx, path), split_seed=getattr(ctx.args, "split_seed", 0))


def cmd_gen_data(ctx: RunContext) -> None:
    args = ctx.args
    dataset = generate_dataset(ctx.settings.synth, args.n, args.seed)
    ctx.seed = args.seed
    save_dataset(dataset, args.out)
    ctx.outputs.append(args.out)
    ctx.manifest_for = args.out
    positives = dataset.labels.sum(axis=0)
    ctx.logger.info("dataset generated", records=len(dataset), **dict(zip(CLASS_NAMES, map(int, positives))))
    print(f"wrote {len(dataset)} records to {args.out}")


def cmd_render(ctx: RunContext) -> None:
    args = ctx.args
    path = _input_path(ctx, args.input)
    if path.suffix.lower() == ".csv":
        records = {path.stem: import_csv(path)}
    else:
        dataset = load_dataset(path)
        indices = args.index if args.index is not None else range(len(dataset))
        for idx in indices:
            if not 0 <= idx < len(dataset):
                raise ConfigurationError(f"Record index {idx} is out of range [0, {len(dataset)}).", index=idx)
        records = {f"record_{idx:05d}": dataset[idx] for idx in indices}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = init_model(ctx.settings.model, layout=ctx.settings.layout)
    for name, record in records.items():
        _, image = prepare_inputs(state, record)
        target = out_dir / f"{name}.pgm"
        write_pgm(image, target)
        ctx.outputs.append(str(target))
    ctx.manifest_for = str(out_dir)
    print(f"wrote {len(records)} images to {out_dir}")


def cmd_train(ctx: RunContext) -> None:
    args = ctx.args
    settings = ctx.settings
    dataset = _load_dataset(ctx, args.data)
    state = init_model(settings.model, seed=settings.train.seed, layout=settings.layout)
    ctx.seed = settings.train.seed
    training_log = fit(state, dataset, settings.train, logger=ctx.logger.get_child("train"))
    save_model(state, args.out)
    log_path = args.log or f"{args.out}.log.jsonl"
    training_log.write(log_path)
    ctx.outputs.extend([args.out, log_path])
    ctx.manifest_for = args.out
    final = training_log.epochs[-1] if training_log.epochs else {}
    print(f"wrote checkpoint {args.out}, final epoch: {json.dumps(final, sort_keys=True)}")


def _model_requested(ctx: RunContext) -> bool:
    return bool(_collect_overrides(ctx.args).get("model"))


def cmd_eval(ctx: RunContext) -> None:
    args = ctx.args
    state = load_model(_input_path(ctx, args.model), expected=ctx.settings.model if _model_requested(ctx) else None)
    dataset = _load_dataset(ctx, args.data)
    ctx.seed = args.split_seed
    split = dataset.split()
    indices = range(len(dataset)) if args.split == "all" else getattr(split, args.split)
    threshold = args.threshold if args.threshold is not None else ctx.settings.train.threshold
    report = evaluate(state, dataset.subset(indices), args.mode, threshold=threshold)
    print(report.format_table())
    if args.out:
        report.write_csv(args.out)
        ctx.outputs.append(args.out)
        ctx.manifest_for = args.out


def cmd_infer(ctx: RunContext) -> None:
    args = ctx.args
    state = load_model(_input_path(ctx, args.model))
    image = read_pgm(_input_path(ctx, args.image))
    expected = (state.config.image_height, state.config.image_width)
    if (image.height, image.width) != expected:
        raise DimensionError(
            f"Image is {image.width}x{image.height} but the model expects {expected[1]}x{expected[0]}.\n\n"
            f"Fix: Render the image with --size {expected[1]}x{expected[0]}.",
            expected=list(expected),
            actual=[image.height, image.width],
        )
    with no_grad():
        probabilities = forward_infer(state, image).data
    for name, probability in zip(CLASS_NAMES, probabilities):
        print(f"{name:<6} {probability:.6f}")
    if args.threshold is not None:
        positive = [name for name, probability in zip(CLASS_NAMES, probabilities) if probability >= args.threshold]
        print(f"positive: {', '.join(positive) or 'none'}")


def cmd_gradcheck(ctx: RunContext) -> None:
    args = ctx.args
    logger = ctx.logger.get_child("gradcheck")
    reports = run_suite(range(args.seeds), step=args.step, tol=args.tol, model_tol=args.model_tol, logger=logger)
    for report in reports:
        print(f"{report.name:<26} {report.max_error:.3e} {'ok' if report.passed else 'FAILED'}")
    if args.out:
        Path(args.out).write_text(json.dumps([report.json_repr() for report in reports], indent=2))
        ctx.outputs.append(args.out)
        ctx.manifest_for = args.out
    failed = [report.name for report in reports if not report.passed]
    if failed:
        raise GradcheckFailed(f"Gradient check failed for: {', '.join(failed)}", failed=failed)


def cmd_ablate(ctx: RunContext) -> None:
    args = ctx.args
    settings = ctx.settings
    dataset = _load_dataset(ctx, args.data)
    seeds = [settings.train.seed + offset for offset in range(args.seeds)]
    ctx.seed = settings.train.seed
    rows = run_ablation(
        dataset, settings.model, settings.train, seeds, layout=settings.layout, logger=ctx.logger.get_child("ablate")
    )
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["config", "enable_cmam", "enable_smam", "median_f1"])
        for row in rows:
            writer.writerow([row.name, row.enable_cmam, row.enable_smam, row.median_f1])
    ctx.outputs.append(args.out)
    if args.raw:
        with open(args.raw, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["config", "seed", "f1"])
            for row in rows:
                writer.writerows([row.name, seed, f1] for seed, f1 in zip(seeds, row.f1))
        ctx.outputs.append(args.raw)
    ctx.manifest_for = args.out
    for row in rows:
        print(f"{row.name:<10} {row.median_f1:.4f}")


def cmd_rerun(ctx: RunContext) -> None:
    """Replay the manifest command with its recorded argv and resolved config.

    The config file, `-e` values and OS environment of the original run are not read again.
    """
    path = _input_path(ctx, ctx.args.manifest)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"Invalid JSON in manifest {path}: {exc}", path=str(path)) from exc
    argv, config = manifest.get("argv"), manifest.get("config")
    if not isinstance(argv, list) or not isinstance(config, dict) or manifest.get("command") in (None, "rerun"):
        raise ConfigurationError(
            f"Invalid manifest: {path}\n\nFix: Use a manifest written by a vizecg command.", path=str(path)
        )
    _run(argv, Configurator.create_project_config(config))


def manifest_path(output: str) -> Path:
    return Path(f"{output.rstrip('/')}.manifest.json")


def _write_manifest(ctx: RunContext, argv: Sequence[str]) -> None:
    if ctx.manifest_for is None:
        return
    manifest = {
        "command": ctx.args.command,
        "argv": list(argv),
        "seed": ctx.seed,
        "config": ctx.config,
        "inputs": ctx.inputs,
        "outputs": ctx.outputs,
        "version": vizecg.__version__,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    manifest_path(ctx.manifest_for).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_config(args: argparse.Namespace) -> ProjectConfig:
    templates = []
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileError(f"Config file not found: {args.config}", path=args.config)
        try:
            templates.append(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"Invalid JSON in {args.config}: {exc}", path=args.config) from exc
    return Configurator().create_configuration(
        templates, [parse_env_flags(args.env)], overrides=_collect_overrides(args), load_os_env=True
    )


def _run(argv: Sequence[str], config: ProjectConfig | None = None) -> int:
    """Parse `argv` and run its command, `config` replaces config file, env and flag loading when given."""
    args = create_parser().parse_args(argv)
    if config is None:
        config = _load_config(args)
    if config["logging"]:
        uvlog.configure(config["logging"])
    root = uvlog.get_logger("vizecg", persistent=True)
    loglevel = args.loglevel or config["loglevel"] or ("DEBUG" if config["debug"] else None)
    if loglevel:
        root.set_level(loglevel)
    ctx = RunContext(args, config, Settings.from_config(config), root.get_child("cli"))
    handler: Callable[[RunContext], None] = args.handler
    handler(ctx)
    _write_manifest(ctx, argv)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    """Run a command and return the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        error = wrap_exception(exc, FileError)
        print(f"error: {error}", file=sys.stderr)
        return error.exit_code
