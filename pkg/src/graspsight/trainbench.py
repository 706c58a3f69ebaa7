"""Training loops, evaluation and the three-way comparison.

The comparison trains, per seed:

* a model-free classifier on ``(I_b, c)``;
* a surrogate classifier on real ``I_d``, using only records whose target is
  at most ``occlusion_tau`` occluded;
* a predictor ``(I_b, c) -> I_d``, then a fresh estimator on the predictor's
  outputs for the training split. The composed pipeline is validated on real
  ``I_b`` and ``c`` only.
"""

from __future__ import annotations

import json
import math
import re
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import dataio, models
from .dataio import DatasetManifest, GraspDataset
from .models import ModelFreeNet, PipelineModel, PredictiveNet, SurrogateNet
from .tensornet import tensor as T
from .tensornet.network import Network, backward
from .tensornet.optim import Adam
from .worldsim import WorldParams


class TrainingDivergedError(ArithmeticError):
    """The training loss became NaN or infinite."""


class EmptySplitError(ValueError):
    pass


class InputKind(str, Enum):
    BEFORE_COMMAND = "before+command"
    DURING = "during"
    GENERATED = "generated"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 1
    augment: bool = True
    early_stop_patience: int = 4
    occlusion_tau: float = 0.25

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError("epochs, batch_size and early_stop_patience must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience > self.epochs:
            raise ValueError("early_stop_patience must not exceed epochs")
        if not 0.0 <= self.occlusion_tau <= 1.0:
            raise ValueError("occlusion_tau must be in [0, 1]")


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# inputs


@dataclass
class ClassifierData:
    """One split as network-ready arrays; ``commands`` is unused for image-only inputs."""

    images: np.ndarray    # (N, 1, H, W) float32
    commands: np.ndarray  # (N, 4)
    labels: np.ndarray    # (N,) float32

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ClassifierData":
        return ClassifierData(self.images[idx], self.commands[idx], self.labels[idx])


def classifier_data(ds: GraspDataset, which: InputKind, generated: Optional[np.ndarray] = None) -> ClassifierData:
    which = InputKind(which)
    if which is InputKind.GENERATED:
        if generated is None or len(generated) != len(ds):
            raise ValueError("generated inputs need one predicted image per record")
        images = np.asarray(generated, dtype=np.float32)
    else:
        images = dataio._images(ds.before if which is InputKind.BEFORE_COMMAND else ds.during)
    return ClassifierData(images, ds.commands.astype(np.float64), ds.labels.astype(np.float32))


def _mirror(images: np.ndarray, commands: np.ndarray, flip: np.ndarray, params: WorldParams):
    if not flip.any():
        return images, commands
    images = images.copy()
    commands = commands.copy()
    images[flip] = images[flip][..., ::-1]
    commands[flip, 0] = (params.bin_min + params.bin_max) - commands[flip, 0]
    commands[flip, 2] = -commands[flip, 2]
    return images, commands


def _epoch_batches(n: int, cfg: TrainConfig, epoch: int):
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(n)
    flips = rng.random(n) < 0.5 if cfg.augment else np.zeros(n, bool)
    for s in range(0, n, cfg.batch_size):
        yield order[s:s + cfg.batch_size], flips[s:s + cfg.batch_size]


def _classify(net: Network, images, commands) -> T.Tensor:
    if isinstance(net, ModelFreeNet):
        return net.forward(images, commands)
    return net.forward(images)


def predict_proba(net: Network, data: ClassifierData, batch: int = 256) -> np.ndarray:
    if isinstance(net, ModelFreeNet):
        return models.modelfree_forward(net, data.images, data.commands, batch)
    return models.surrogate_forward(net, data.images, batch)


# --------------------------------------------------------------------------
# evaluation


def confusion(probabilities: np.ndarray, labels: np.ndarray) -> EvalReport:
    """Threshold at 0.5; a probability of exactly 0.5 predicts failure."""
    p = np.asarray(probabilities)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"{p.shape} probabilities for {y.shape} labels")
    if len(y) == 0:
        raise EmptySplitError("cannot evaluate an empty split")
    pred = p > 0.5
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    return EvalReport((tp + tn) / len(y), tp, fp, tn, fn, len(y))


def evaluate(net: Network, data: ClassifierData) -> EvalReport:
    if len(data) == 0:
        raise EmptySplitError("cannot evaluate an empty split")
    return confusion(predict_proba(net, data), data.labels)


def evaluate_pipeline(pipeline: PipelineModel, before: np.ndarray, commands: np.ndarray,
                      labels: np.ndarray) -> EvalReport:
    """Scores the composed model; it only ever sees the before image and the command."""
    return confusion(models.pipeline_forward(pipeline, before, commands), labels)


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val: Optional[EvalReport] = None
    val_loss: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"epoch": self.epoch, "train_loss": self.train_loss}
        if self.val is not None:
            d["val"] = self.val.to_dict()
        if self.val_loss is not None:
            d["val_loss"] = self.val_loss
        return d


@dataclass
class TrainResult:
    net: Network
    history: list[EpochRecord]
    best_epoch: int

    @property
    def best(self) -> EpochRecord:
        return self.history[self.best_epoch]


def _finite(loss: float, epoch: int) -> float:
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"training loss became {loss} in epoch {epoch}")
    return loss


def train_classifier(net: Network, train: ClassifierData, val: ClassifierData, cfg: TrainConfig,
                     params: WorldParams = WorldParams(),
                     log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Adam on binary cross-entropy; keeps the best-validation parameters."""
    cfg.validate()
    if len(train) == 0 or len(val) == 0:
        raise EmptySplitError("train and validation splits must be non-empty")
    opt = Adam(net.parameters(), lr=cfg.learning_rate)
    history: list[EpochRecord] = []
    best_acc, best_state, best_epoch, stale = -1.0, net.state(), 0, 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx, flip in _epoch_batches(len(train), cfg, epoch):
            images, commands = _mirror(train.images[idx], train.commands[idx], flip, params)
            loss = T.bce_loss(_classify(net, images, commands), train.labels[idx])
            _finite(loss.item(), epoch)
            backward(net, loss)
            opt.step()
            losses.append(loss.item())
        report = evaluate(net, val)
        history.append(EpochRecord(epoch, float(np.mean(losses)), report))
        if log:
            log(f"{net.arch} epoch {epoch}: loss {history[-1].train_loss:.4f} val {report.accuracy:.4f}")
        if report.accuracy > best_acc:
            best_acc, best_state, best_epoch, stale = report.accuracy, net.state(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    net.load_state(best_state)
    return TrainResult(net, history, best_epoch)


@dataclass
class PredictiveData:
    before: np.ndarray    # (N, 1, H, W) float32
    during: np.ndarray
    commands: np.ndarray

    def __len__(self) -> int:
        return len(self.before)

    @classmethod
    def from_dataset(cls, ds: GraspDataset) -> "PredictiveData":
        return cls(dataio._images(ds.before), dataio._images(ds.during), ds.commands.astype(np.float64))


def predictive_loss(net: PredictiveNet, data: PredictiveData, batch: int = 256) -> float:
    total = 0.0
    for s in range(0, len(data), batch):
        pred = models.predictive_forward(net, data.before[s:s + batch], data.commands[s:s + batch]).during
        total += float(np.sum((pred - data.during[s:s + batch]) ** 2, dtype=np.float64))
    return total / data.during.size


def train_predictive(net: PredictiveNet, train: PredictiveData, val: PredictiveData, cfg: TrainConfig,
                     params: WorldParams = WorldParams(),
                     log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Adam on the pixel MSE between generated and real during images."""
    cfg.validate()
    if len(train) == 0 or len(val) == 0:
        raise EmptySplitError("train and validation splits must be non-empty")
    opt = Adam(net.parameters(), lr=cfg.learning_rate)
    history: list[EpochRecord] = []
    best_loss, best_state, best_epoch, stale = math.inf, net.state(), 0, 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx, flip in _epoch_batches(len(train), cfg, epoch):
            before, commands = _mirror(train.before[idx], train.commands[idx], flip, params)
            during = train.during[idx]
            if flip.any():
                during = during.copy()
                during[flip] = during[flip][..., ::-1]
            loss = T.mse_loss(net.forward(before, commands), during)
            _finite(loss.item(), epoch)
            backward(net, loss)
            opt.step()
            losses.append(loss.item())
        val_loss = predictive_loss(net, val)
        history.append(EpochRecord(epoch, float(np.mean(losses)), val_loss=val_loss))
        if log:
            log(f"predictive epoch {epoch}: loss {history[-1].train_loss:.5f} val {val_loss:.5f}")
        if val_loss < best_loss:
            best_loss, best_state, best_epoch, stale = val_loss, net.state(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    net.load_state(best_state)
    return TrainResult(net, history, best_epoch)


# --------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class ComparisonConfig:
    # per-experiment training; the surrogate sees ~20% fewer records per epoch
    # after occlusion filtering and still improves after 6 epochs
    modelfree: TrainConfig = TrainConfig(epochs=6, early_stop_patience=3)
    surrogate: TrainConfig = TrainConfig(epochs=12, early_stop_patience=4)
    predictive: TrainConfig = TrainConfig(epochs=2, learning_rate=3e-3, early_stop_patience=2)
    estimator: TrainConfig = TrainConfig(epochs=6, early_stop_patience=3)
    seeds: tuple[int, ...] = (1, 2, 3)
    channels: tuple[int, ...] = (8, 16, 32, 64)
    hidden: int = 128
    stem: str = "full"
    predictor_encoder: tuple[int, int] = (8, 16)
    predictor_bottleneck: int = 8
    predictor_head: int = 16
    occlusion_tau: float = 0.25
    # train the pipeline's estimator on generated images only, or on generated
    # and real during images together
    estimator_inputs: str = "generated"
    split_seed: int = 0
    train_fraction: float = 0.9

    def train_configs(self) -> dict[str, TrainConfig]:
        return {"model-free": self.modelfree, "surrogate": self.surrogate,
                "predictive": self.predictive, "estimator": self.estimator}

    def validate(self) -> None:
        for c in self.train_configs().values():
            c.validate()
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.stem not in models.STEMS:
            raise ValueError(f"stem must be one of {sorted(models.STEMS)}")
        if self.estimator_inputs not in ("generated", "mixed"):
            raise ValueError("estimator_inputs must be 'generated' or 'mixed'")
        if not 0.0 <= self.occlusion_tau <= 1.0:
            raise ValueError("occlusion_tau must be in [0, 1]")


@dataclass
class ExperimentScore:
    train_accuracy: float
    val_accuracy: float


EXPERIMENTS = ("model-free", "surrogate", "pipeline")


@dataclass
class ComparisonReport:
    seed: int
    dataset_digest: int
    seconds: float
    experiments: dict[str, ExperimentScore]
    predictor_val_mse: float
    surrogate_train_count: int
    surrogate_val_count: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["experiments"] = {k: asdict(v) for k, v in self.experiments.items()}
        return d


@dataclass
class SeedRun:
    """Everything a single seed's comparison produced, models included."""

    report: ComparisonReport
    modelfree: TrainResult
    surrogate: TrainResult
    predictor: TrainResult
    estimator: TrainResult

    @property
    def pipeline(self) -> PipelineModel:
        return PipelineModel(self.predictor.net, self.estimator.net)


def _clock() -> float:
    return time.process_time()


def run_seed(ds: GraspDataset, manifest: DatasetManifest, cfg: ComparisonConfig, seed: int,
             params: WorldParams = WorldParams(), log: Optional[Callable[[str], None]] = None) -> SeedRun:
    cfg.validate()
    t0 = _clock()
    train_idx, val_idx = dataio.split(manifest, cfg.train_fraction, cfg.split_seed)
    train_ds, val_ds = ds.subset(train_idx), ds.subset(val_idx)
    mcfg, scfg, pcfg, ecfg = (replace(c, seed=seed, occlusion_tau=cfg.occlusion_tau)
                              for c in cfg.train_configs().values())
    res = ds.image_shape[0]

    def classifier(cls, offset):
        return cls(resolution=res, channels=cfg.channels, hidden=cfg.hidden, stem=cfg.stem,
                   seed=seed * 100 + offset)

    # before image plus command
    mf = train_classifier(classifier(ModelFreeNet, 1),
                          classifier_data(train_ds, InputKind.BEFORE_COMMAND),
                          classifier_data(val_ds, InputKind.BEFORE_COMMAND), mcfg, params, log)
    mf_train = evaluate(mf.net, classifier_data(train_ds, InputKind.BEFORE_COMMAND))

    # real during image, occlusion-filtered
    s_train_ds = dataio.filter_by_occlusion(train_ds, cfg.occlusion_tau)
    s_val_ds = dataio.filter_by_occlusion(val_ds, cfg.occlusion_tau)
    s_train = classifier_data(s_train_ds, InputKind.DURING)
    sur = train_classifier(classifier(SurrogateNet, 2), s_train,
                           classifier_data(s_val_ds, InputKind.DURING), scfg, params, log)
    sur_train = evaluate(sur.net, s_train)
    del s_train

    # predictor, then an estimator on what it generates
    p_train = PredictiveData.from_dataset(train_ds)
    p_val = PredictiveData.from_dataset(val_ds)
    predictor = PredictiveNet(resolution=res, encoder=cfg.predictor_encoder,
                              bottleneck=cfg.predictor_bottleneck, head=cfg.predictor_head,
                              seed=seed * 100 + 3, params=params)
    pred = train_predictive(predictor, p_train, p_val, pcfg, params, log)
    generated = models.predictive_forward(pred.net, p_train.before, p_train.commands).during
    est_train = classifier_data(train_ds, InputKind.GENERATED, generated)
    del generated, p_train
    if cfg.estimator_inputs == "mixed":
        real = classifier_data(train_ds, InputKind.DURING)
        est_train = ClassifierData(np.concatenate([est_train.images, real.images]),
                                   np.concatenate([est_train.commands, real.commands]),
                                   np.concatenate([est_train.labels, real.labels]))
    # validation inputs for the estimator are generated from real I_b and c
    val_generated = models.predictive_forward(pred.net, p_val.before, p_val.commands).during
    est = train_classifier(classifier(SurrogateNet, 4), est_train,
                           classifier_data(val_ds, InputKind.GENERATED, val_generated), ecfg, params, log)
    est_train_report = evaluate(est.net, est_train)
    pipeline = PipelineModel(pred.net, est.net)
    pipe_val = evaluate_pipeline(pipeline, p_val.before, p_val.commands, val_ds.labels)

    report = ComparisonReport(
        seed=seed, dataset_digest=manifest.world_params_digest, seconds=_clock() - t0,
        experiments={
            "model-free": ExperimentScore(mf_train.accuracy, mf.best.val.accuracy),
            "surrogate": ExperimentScore(sur_train.accuracy, sur.best.val.accuracy),
            "pipeline": ExperimentScore(est_train_report.accuracy, pipe_val.accuracy),
        },
        predictor_val_mse=pred.best.val_loss,
        surrogate_train_count=len(s_train_ds), surrogate_val_count=len(s_val_ds))
    return SeedRun(report, mf, sur, pred, est)


@dataclass
class MultiSeedReport:
    runs: list[ComparisonReport]

    def median(self, experiment: str, column: str = "val_accuracy") -> float:
        return statistics.median(getattr(r.experiments[experiment], column) for r in self.runs)

    def ordering(self) -> dict[str, bool]:
        mf, sur, pipe = (self.median(e) for e in EXPERIMENTS)
        return {"surrogate >= 0.85": sur >= 0.85,
                "surrogate - model-free >= 0.05": sur - mf >= 0.05,
                "model-free < pipeline": mf < pipe,
                "pipeline <= surrogate": pipe <= sur}

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in self.runs)

    def to_dict(self) -> dict:
        return {"runs": [r.to_dict() for r in self.runs],
                "median": {e: {"train_accuracy": self.median(e, "train_accuracy"),
                               "val_accuracy": self.median(e)} for e in EXPERIMENTS},
                "ordering": self.ordering(),
                "seconds": self.seconds}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        rows = [("experiment", "train", "validation")]
        for e in EXPERIMENTS:
            rows.append((e, f"{self.median(e, 'train_accuracy'):.3f}", f"{self.median(e):.3f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [f"Grasp success estimator accuracy (median of {len(self.runs)} seeds)"]
        for k, r in enumerate(rows):
            lines.append("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w)
                                   for i, (cell, w) in enumerate(zip(r, widths))))
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        lines.append("")
        for r in self.runs:
            cells = ", ".join(f"{e} {r.experiments[e].val_accuracy:.3f}" for e in EXPERIMENTS)
            lines.append(f"seed {r.seed}: {cells} ({r.seconds:.0f} s)")
        lines.append("")
        for name, ok in self.ordering().items():
            lines.append(f"{'ok  ' if ok else 'FAIL'} {name}")
        return "\n".join(lines) + "\n"


def run_comparison(ds: GraspDataset, manifest: DatasetManifest, cfg: ComparisonConfig = ComparisonConfig(),
                   params: WorldParams = WorldParams(),
                   log: Optional[Callable[[str], None]] = None) -> tuple[MultiSeedReport, list[SeedRun]]:
    runs = [run_seed(ds, manifest, cfg, seed, params, log) for seed in cfg.seeds]
    return MultiSeedReport([r.report for r in runs]), runs


# --------------------------------------------------------------------------
# prediction grids


def render_prediction_grid(net: PredictiveNet, data: PredictiveData, n: int) -> np.ndarray:
    """``n`` rows of ``[I_b | generated | I_d]``, values in [0, 1]."""
    if n < 1 or n > len(data):
        raise ValueError(f"n must be in [1, {len(data)}], got {n}")
    pred = models.predictive_forward(net, data.before[:n], data.commands[:n]).during
    rows = [np.concatenate([data.before[i, 0], pred[i, 0], data.during[i, 0]], axis=1) for i in range(n)]
    return np.clip(np.concatenate(rows, axis=0), 0.0, 1.0)


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def encode_pgm(image: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255) of a [0, 1] grayscale image."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images are 2-d")
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    m = _PGM_HEADER.match(blob)
    if m is None or int(m.group(3)) != 255:
        raise ValueError("not a P5 PGM with maxval 255")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(blob[m.end():m.end() + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError("truncated PGM payload")
    return pixels.reshape(h, w)


def write_pgm(path, image: np.ndarray) -> int:
    blob = encode_pgm(image)
    Path(path).write_bytes(blob)
    return len(blob)
