"""Command-line pipeline: generate phantoms, train, predict, evaluate.

Settings resolve in three layers: dataclass defaults, then a flat
``key = value`` config file given with --config, then explicit flags.
Every JSON artifact embeds the fully resolved settings so a run can be
reproduced from its outputs alone. Errors leave exit code 1 and a
single ``stanseg: error: <Type>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

from .autodiff import Tensor, no_grad
from .data_io import (
    SynthConfig,
    bilinear_resize,
    dataset_manifest,
    nearest_resize,
    read_pgm,
    save_image,
    save_mask,
    synth_generate,
)
from .metrics import binarize, evaluate, report_to_csv, report_to_json
from .model import ModelConfig, build_model, load_weights, save_weights
from .training import TrainConfig, cross_validate, history_to_json, train


class ConfigError(ValueError):
    """Bad key, value, or syntax in a config file."""


@dataclass(frozen=True)
class RunConfig:
    """Flat union of model, training, synthesis, and evaluation settings."""

    arch: str = "stan"
    input_size: int = 256
    base_filters: int = 32
    seed: int = 0
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shift_fraction: float = 0.1
    folds: int = 5
    threshold: float = 0.5
    small_axis: float = 120.0
    count: int = 8
    axis_range: tuple[float, float] = (8.0, 20.0)
    axis_list: tuple[float, ...] | None = None
    lesion_intensity: float = 0.25
    background_intensity: float = 0.75
    noise_sigma: float = 0.08
    rotation_range: tuple[float, float] = (0.0, math.pi)

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.small_axis <= 0:
            raise ConfigError(f"small_axis must be positive, got {self.small_axis}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_size=self.input_size,
                           base_filters=self.base_filters,
                           arch=self.arch, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                           learning_rate=self.learning_rate, beta1=self.beta1,
                           beta2=self.beta2, eps=self.eps,
                           shift_fraction=self.shift_fraction,
                           seed=self.seed, folds=self.folds)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(count=self.count, image_size=self.input_size,
                           axis_range=self.axis_range, axis_list=self.axis_list,
                           lesion_intensity=self.lesion_intensity,
                           background_intensity=self.background_intensity,
                           noise_sigma=self.noise_sigma,
                           rotation_range=self.rotation_range, seed=self.seed)


def _float_pair(text: str) -> tuple[float, float]:
    parts = [p for chunk in text.split(",") for p in chunk.split()]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _float_list(text: str) -> tuple[float, ...] | None:
    parts = [p for chunk in text.split(",") for p in chunk.split()]
    if not parts:
        return None
    return tuple(float(p) for p in parts)


def _arch_name(text: str) -> str:
    if text not in ("stan", "unet"):
        raise ValueError(f"arch must be stan or unet, got {text!r}")
    return text


_KEY_PARSERS = {
    "arch": _arch_name,
    "input_size": int,
    "base_filters": int,
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "shift_fraction": float,
    "folds": int,
    "threshold": float,
    "small_axis": float,
    "count": int,
    "axis_range": _float_pair,
    "axis_list": _float_list,
    "lesion_intensity": float,
    "background_intensity": float,
    "noise_sigma": float,
    "rotation_range": _float_pair,
}


def parse_config_text(text: str, source: str = "config") -> dict:
    """Parse ``key = value`` lines; blank lines and # comments ignored."""
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEY_PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            overrides[key] = _KEY_PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}")
    return overrides


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the --config file, then explicit flags."""
    values: dict = {}
    if getattr(args, "config", None) is not None:
        path = Path(args.config)
        values.update(parse_config_text(path.read_text(), source=str(path)))
    for f in dataclasses.fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    return RunConfig(**values)


# ---------------------------------------------------------------- commands

_TABLE_COLUMNS = ("TPR", "FPR", "JI", "DSC", "AER", "AHE", "AME")
_TABLE_SOURCES = ("tpr", "fpr", "ji", "dsc", "aer", "he", "mae")


def format_table(aggregates: dict) -> str:
    """Stratified aggregate table; AHE/AME are the mean boundary errors."""
    header = f"{'stratum':<8} {'n':>4}" + "".join(
        f" {c:>8}" for c in _TABLE_COLUMNS)
    lines = [header]
    for name in ("all", "small", "large"):
        entry = aggregates[name]
        cells = [f"{name:<8}", f"{entry['n']:>4}"]
        for src in _TABLE_SOURCES:
            v = entry[src]
            cells.append(f"{v:>8.3f}" if v is not None else f"{'-':>8}")
        lines.append(" ".join(cells))
    return "\n".join(lines)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_synth(run: RunConfig, args: argparse.Namespace) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = synth_generate(run.synth_config())
    for s in samples:
        save_image(s.image, out / f"{s.id}.pgm")
        save_mask(s.mask, out / f"{s.id}_mask.pgm")
    _write_json(out / "dataset.json", {
        "command": "synth",
        "samples": [s.id for s in samples],
        "run_config": run.as_dict(),
    })
    print(f"wrote {len(samples)} image/mask pairs to {out}")


def cmd_train(run: RunConfig, args: argparse.Namespace) -> None:
    samples = dataset_manifest(args.data_dir, target_size=run.input_size)
    model = build_model(run.model_config())
    model, history = train(model, samples, run.train_config())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(model, out / "weights.bin")
    payload = json.loads(history_to_json(history))
    payload.update({"command": "train", "run_config": run.as_dict()})
    _write_json(out / "history.json", payload)
    last = history.epoch_losses[-1] if history.epoch_losses else float("nan")
    print(f"trained {run.arch} for {run.epochs} epochs on {len(samples)} "
          f"samples, final loss {last:.4f}; weights in {out}")


def cmd_predict(run: RunConfig, args: argparse.Namespace) -> None:
    model = load_weights(args.weights)
    size = model.config.input_size
    image = read_pgm(args.image) / 255.0
    native = image.shape
    net_in = image if native == (size, size) else bilinear_resize(image, size, size)
    with no_grad():
        out = model.forward(Tensor(net_in[None, None, :, :]))
    mask = binarize(out.data[0, 0], run.threshold)
    if native != (size, size):
        mask = nearest_resize(mask, *native)
    out_path = Path(args.out_mask)
    save_mask(mask, out_path)
    _write_json(out_path.with_suffix(out_path.suffix + ".json"), {
        "command": "predict",
        "run_config": run.as_dict(),
        "weights": {"arch": model.config.arch, "input_size": size,
                    "base_filters": model.config.base_filters,
                    "seed": model.config.seed},
        "foreground_pixels": int(mask.sum()),
    })
    print(f"wrote mask with {int(mask.sum())} foreground pixels to {out_path}")


def cmd_eval(run: RunConfig, args: argparse.Namespace) -> None:
    model = load_weights(args.weights)
    samples = dataset_manifest(args.data_dir,
                               target_size=model.config.input_size)
    report = evaluate(model, samples, threshold=run.threshold,
                      small_axis=run.small_axis,
                      provenance={"command": "eval",
                                  "run_config": run.as_dict()})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_to_json(report) + "\n")
    (out / "report.csv").write_text(report_to_csv(report))
    print(format_table(report.aggregates))


def cmd_crossval(run: RunConfig, args: argparse.Namespace) -> None:
    samples = dataset_manifest(args.data_dir, target_size=run.input_size)
    fold_reports, overall, histories = cross_validate(
        run.model_config(), samples, run.train_config(),
        threshold=run.threshold, small_axis=run.small_axis)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "crossval.json", {
        "command": "crossval",
        "run_config": run.as_dict(),
        "overall": {"aggregates": overall.aggregates,
                    "excluded": overall.excluded,
                    "provenance": overall.provenance},
        "folds": [{"aggregates": r.aggregates,
                   "provenance": r.provenance,
                   "rows": [dataclasses.asdict(row) for row in r.rows]}
                  for r in fold_reports],
        "histories": [json.loads(history_to_json(h)) for h in histories],
    })
    print(format_table(overall.aggregates))


# ------------------------------------------------------------------ parser

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--arch", type=_arch_name)
    common.add_argument("--input-size", type=int)
    common.add_argument("--base-filters", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--lr", type=float, dest="learning_rate")
    common.add_argument("--threshold", type=float)
    common.add_argument("--small-axis", type=float)

    parser = argparse.ArgumentParser(
        prog="stanseg",
        description="Train and evaluate tumor segmentation networks on "
                    "grayscale PGM images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic phantom dataset")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int)
    p.add_argument("--axis-list", type=_float_list,
                   help="comma-separated lesion axis lengths, cycled")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common],
                       help="train a model on an image/mask directory")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common],
                       help="segment one image with trained weights")
    p.add_argument("weights")
    p.add_argument("image")
    p.add_argument("out_mask")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common],
                       help="score trained weights against ground truth")
    p.add_argument("weights")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", parents=[common],
                       help="k-fold cross-validation on one directory")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_crossval)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        run = resolve_run_config(args)
        args.func(run, args)
    except Exception as exc:
        message = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"stanseg: error: {exc.__class__.__name__}: {message}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
