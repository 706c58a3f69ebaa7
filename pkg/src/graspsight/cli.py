"""Command-line entry point: ``graspsight {gen,train,eval,compare,render}``.

Exit codes: 0 success, 2 usage or config error, 3 missing or unreadable
input, 4 numeric failure during training.

All settings live in one optional JSON config; flags override it. Unknown
keys are rejected with the offending key path in the message.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from . import dataio, models
from . import trainbench as tb
from .dataio import GenParams
from .tensornet import checkpoint
from .worldsim import WorldParams

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
TASKS = ("model-free", "surrogate", "predictive")
GRID_ROWS = 8


class ConfigError(ValueError):
    pass


class InputError(OSError):
    pass


@dataclass
class RunConfig:
    """Everything a run reads; every field has a default."""

    world: WorldParams = field(default_factory=WorldParams)
    gen: GenParams = field(default_factory=GenParams)
    comparison: tb.ComparisonConfig = field(default_factory=tb.ComparisonConfig)
    occlusion_tau: float = 0.25
    data_dir: str = "data"
    out_dir: str = "out"

    def validate(self) -> None:
        self.world.validate()
        self.gen.validate()
        self.comparison.validate()
        if not 0.0 <= self.occlusion_tau <= 1.0:
            raise ValueError("occlusion_tau must be in [0, 1]")

    def comparison_config(self) -> tb.ComparisonConfig:
        return replace(self.comparison, occlusion_tau=self.occlusion_tau)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Any, path: str):
    """Recursively build dataclass ``cls`` from JSON data, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key {where!r}")
        kwargs[key] = _coerce(hints[key], value, where)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _coerce(hint, value, where: str):
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    origin = typing.get_origin(hint)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        args = typing.get_args(hint)
        item = args[0] if args else float
        return tuple(_coerce(item, v, where) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        cfg = _build(RunConfig, data, "")
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _with_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    gen = cfg.gen
    for flag, name in (("n", "n"), ("seed", "seed"), ("image_size", "image_size")):
        value = getattr(args, flag, None)
        if value is not None:
            gen = replace(gen, **{name: value})
    comparison = cfg.comparison
    if getattr(args, "seeds", None):
        comparison = replace(comparison, seeds=tuple(args.seeds))
    if getattr(args, "epochs", None) is not None:
        comparison = replace(comparison, **{
            name: replace(c, epochs=args.epochs, early_stop_patience=min(c.early_stop_patience, args.epochs))
            for name, c in zip(("modelfree", "surrogate", "predictive", "estimator"),
                               comparison.train_configs().values())})
    cfg = replace(cfg, gen=gen, comparison=comparison)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _load_data(directory: str, cfg: RunConfig):
    d = Path(directory)
    if not (d / dataio.MANIFEST_FILE).is_file() or not (d / dataio.RECORDS_FILE).is_file():
        raise InputError(f"{d} does not hold a dataset ({dataio.RECORDS_FILE} and {dataio.MANIFEST_FILE})")
    try:
        ds, manifest = dataio.load_dataset_dir(d)
    except (dataio.BadMagicError, dataio.VersionMismatchError, dataio.TruncatedFileError) as exc:
        raise InputError(f"cannot read dataset in {d}: {exc}") from None
    if manifest.world_params_digest != dataio.world_params_digest(cfg.world, replace(cfg.gen, image_size=manifest.image_h)):
        raise ConfigError(f"dataset in {d} was generated with different world or generation parameters")
    return ds, manifest


def _emit(args: argparse.Namespace, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True) if args.json else text)


def _log(args: argparse.Namespace):
    if args.quiet:
        return None
    t0 = time.perf_counter()
    return lambda msg: print(f"[{time.perf_counter() - t0:7.1f}s] {msg}", file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    out = args.out or cfg.data_dir
    manifest = dataio.generate_dataset(cfg.world, cfg.gen, out, workers=args.workers)
    rate = manifest.positive_count / manifest.count if manifest.count else 0.0
    _emit(args, {"count": manifest.count, "positive_rate": rate, "out": str(out)},
          f"wrote {manifest.count} records to {out} (positive rate {rate:.3f})")
    return EXIT_OK


def _split(ds, manifest, cfg: RunConfig, which: str):
    comp = cfg.comparison
    train_idx, val_idx = dataio.split(manifest, comp.train_fraction, comp.split_seed)
    return ds.subset(train_idx if which == "train" else val_idx)


def _new_network(task: str, cfg: RunConfig, resolution: int, seed: int):
    comp = cfg.comparison
    if task == "predictive":
        return models.PredictiveNet(resolution, comp.predictor_encoder, comp.predictor_bottleneck,
                                    comp.predictor_head, seed=seed, params=cfg.world)
    cls = models.ModelFreeNet if task == "model-free" else models.SurrogateNet
    kwargs = {"params": cfg.world} if task == "model-free" else {}
    return cls(resolution, comp.channels, comp.hidden, seed=seed, stem=comp.stem, **kwargs)


def _classifier_split(task: str, ds, cfg: RunConfig) -> tb.ClassifierData:
    if task == "surrogate":
        return tb.classifier_data(dataio.filter_by_occlusion(ds, cfg.occlusion_tau), tb.InputKind.DURING)
    return tb.classifier_data(ds, tb.InputKind.BEFORE_COMMAND)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    ds, manifest = _load_data(args.data or cfg.data_dir, cfg)
    train_ds, val_ds = _split(ds, manifest, cfg, "train"), _split(ds, manifest, cfg, "val")
    seed = args.seed if args.seed is not None else cfg.comparison.seeds[0]
    net = _new_network(args.task, cfg, manifest.image_h, seed)
    log = _log(args)
    if args.task == "predictive":
        tcfg = replace(cfg.comparison.predictive, seed=seed)
        result = tb.train_predictive(net, tb.PredictiveData.from_dataset(train_ds),
                                     tb.PredictiveData.from_dataset(val_ds), tcfg, cfg.world, log)
        summary = {"best_epoch": result.best_epoch, "val_mse": result.best.val_loss}
    else:
        tcfg = replace(cfg.comparison.train_configs()[args.task], seed=seed, occlusion_tau=cfg.occlusion_tau)
        result = tb.train_classifier(net, _classifier_split(args.task, train_ds, cfg),
                                     _classifier_split(args.task, val_ds, cfg), tcfg, cfg.world, log)
        summary = {"best_epoch": result.best_epoch, "val_accuracy": result.best.val.accuracy}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    models.save_model(result.net, out)
    history = Path(str(out) + ".history.json")
    history.write_text(json.dumps([h.to_dict() for h in result.history], indent=2))
    summary.update(task=args.task, checkpoint=str(out), history=str(history), epochs=len(result.history))
    _emit(args, summary, f"{args.task}: {len(result.history)} epochs, best epoch {result.best_epoch}, "
                         f"checkpoint {out}")
    return EXIT_OK


def _load_model(path: str, cfg: RunConfig):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"checkpoint {p} does not exist")
    try:
        return models.load_model(p, cfg.world)
    except (checkpoint.BadMagicError, checkpoint.VersionMismatchError,
            checkpoint.TruncatedCheckpointError) as exc:
        raise InputError(f"cannot read checkpoint {p}: {exc}") from None
    except checkpoint.ShapeMismatchError as exc:
        raise ConfigError(str(exc)) from None


def _check_resolution(net, manifest) -> None:
    r = int(net.hparams["resolution"])
    if (manifest.image_h, manifest.image_w) != (r, r):
        raise ConfigError(f"checkpoint expects {r}x{r} images but the dataset has "
                          f"{manifest.image_h}x{manifest.image_w}")


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    net = _load_model(args.ckpt, cfg)
    if net.arch == "predictive":
        raise ConfigError("eval needs a classifier checkpoint (model-free or surrogate)")
    ds, manifest = _load_data(args.data or cfg.data_dir, cfg)
    _check_resolution(net, manifest)
    report = tb.evaluate(net, _classifier_split(net.arch, _split(ds, manifest, cfg, args.split), cfg))
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    ds, manifest = _load_data(args.data or cfg.data_dir, cfg)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report, runs = tb.run_comparison(ds, manifest, cfg.comparison_config(), cfg.world, _log(args))
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json())
    val = tb.PredictiveData.from_dataset(_split(ds, manifest, cfg, "val"))
    grid = tb.render_prediction_grid(runs[0].predictor.net, val, min(GRID_ROWS, len(val)))
    tb.write_pgm(out / "predictions.pgm", grid)
    if args.save_models:
        for run in runs:
            seed = run.report.seed
            models.save_model(run.modelfree.net, out / f"model-free-{seed}.ckpt")
            models.save_model(run.surrogate.net, out / f"surrogate-{seed}.ckpt")
            models.save_model(run.predictor.net, out / f"predictive-{seed}.ckpt")
            models.save_model(run.estimator.net, out / f"estimator-{seed}.ckpt")
    _emit(args, report.to_dict(), report.to_text())
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    net = _load_model(args.ckpt, cfg)
    if net.arch != "predictive":
        raise ConfigError(f"render needs a predictive checkpoint, got {net.arch}")
    ds, manifest = _load_data(args.data or cfg.data_dir, cfg)
    _check_resolution(net, manifest)
    data = tb.PredictiveData.from_dataset(_split(ds, manifest, cfg, args.split))
    if not 1 <= args.n <= len(data):
        raise ConfigError(f"--n must be between 1 and {len(data)}")
    grid = tb.render_prediction_grid(net, data, args.n)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    tb.write_pgm(args.out, grid)
    print(f"wrote {grid.shape[0]}x{grid.shape[1]} grid to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (all fields optional)")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--quiet", action="store_true", help="no progress lines on stderr")

    parser = argparse.ArgumentParser(prog="graspsight", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a labelled dataset")
    p.add_argument("--out", help="output directory (default: config data_dir)")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--workers", type=int, help="worker processes (default: GRASPSIGHT_THREADS or all cores)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train one network")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--data", help="dataset directory (default: config data_dir)")
    p.add_argument("--out", required=True, help="checkpoint path; history goes to <out>.history.json")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a classifier checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset directory (default: config data_dir)")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="run the three-way comparison")
    p.add_argument("--data", help="dataset directory (default: config data_dir)")
    p.add_argument("--out", help="report directory (default: config out_dir)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--save-models", action="store_true", help="also write every trained checkpoint")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render", parents=[common], help="write a prediction grid as PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset directory (default: config data_dir)")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"graspsight: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as exc:
        print(f"graspsight: {exc}", file=sys.stderr)
        return EXIT_IO
    except (tb.TrainingDivergedError, FloatingPointError) as exc:
        print(f"graspsight: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except tb.EmptySplitError as exc:
        print(f"graspsight: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
