"""Grasp-success classifiers, the during-image predictor and their composition.

Images enter every network as ``(N, 1, H, W)`` float arrays in [0, 1] and
commands as ``(N, 4)`` arrays of ``(x, y, theta, aperture)`` in world units.

Classifier trunk: a stem convolution (3x3 at full resolution, or 4x4 with
stride 2), then 3x3 conv blocks, each ending in relu and a 2x2 max pool, then
a dense layer and a sigmoid head. Pixels are standardized on entry.

The predictor composites ``m * I_b + (1 - m) * g``. Its bottleneck receives the
tiled command encoding; its full-resolution head additionally receives two
planes holding every pixel's position in the gripper's own frame (see
:func:`command_frame`). Without those planes the decoder has to synthesise a
one-pixel-wide sprite from constant channels, which did not train in the CPU
budget. The camera offset differs per scene and is only visible through the
bin walls, so a small dense branch reads the image's row and column intensity
profiles and shifts the planes; without it the sprite blurs over the
offset range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage, signal

from . import worldsim as ws
from .tensornet import checkpoint
from .tensornet import tensor as T
from .tensornet.network import Network
from .tensornet.tensor import Tensor, ShapeError
from .worldsim import GraspCommand, WorldParams

ENCODING_SIZE = 5
FRAME_PLANES = 2
FRAME_CLIP = 3.0
PIXEL_MEAN, PIXEL_STD = 0.16, 0.14


# command encoding --------------------------------------------------------------


def encode_command(c: GraspCommand, params: WorldParams = WorldParams()) -> np.ndarray:
    """``(x_hat, y_hat, sin theta, cos theta, a / a_max)`` with positions scaled to [-1, 1] over the bin."""
    return encode_commands(np.array([[c.x, c.y, c.theta, c.aperture]]), params)[0]


def encode_commands(commands: np.ndarray, params: WorldParams = WorldParams()) -> np.ndarray:
    commands = np.asarray(commands, dtype=np.float64)
    centre = 0.5 * (params.bin_min + params.bin_max)
    half = 0.5 * params.bin_extent
    out = np.empty((commands.shape[0], ENCODING_SIZE))
    out[:, 0] = (commands[:, 0] - centre) / half
    out[:, 1] = (commands[:, 1] - centre) / half
    out[:, 2] = np.sin(commands[:, 2])
    out[:, 3] = np.cos(commands[:, 2])
    out[:, 4] = commands[:, 3] / params.a_max
    return np.clip(out, -1.0, 1.0)


def _signed_frame(commands: np.ndarray, resolution: int) -> tuple[np.ndarray, ...]:
    """Signed gripper-frame offsets ``u`` (closing axis) and ``v`` (along the pads)
    of every pixel centre, each ``(N, 1, R, R)``, plus ``sin`` and ``cos`` of theta."""
    commands = np.asarray(commands, dtype=np.float64)
    px = (np.arange(resolution) + 0.5) / resolution
    x, y, theta = (commands[:, k, None, None, None] for k in range(3))
    dx = px[None, None, None, :] - x
    dy = px[None, None, :, None] - y
    s, co = np.sin(theta), np.cos(theta)
    return -s * dx + co * dy, co * dx + s * dy, s, co


def command_frame(commands: np.ndarray, resolution: int, params: WorldParams = WorldParams(),
                  shift: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-pixel gripper-frame coordinates, shape ``(N, 2, R, R)``.

    Plane 0 is ``(|u| - a/2) / L`` and plane 1 is ``|v| / L``, where ``u`` runs
    along the closing axis, ``v`` along the pads and ``L`` is the pad half
    length. Both are clipped to ``[-3, 3]`` so far-away pixels saturate.
    ``shift`` is an optional ``(N, 2)`` image-content offset in world units,
    such as the camera jitter.
    """
    commands = np.asarray(commands, dtype=np.float64)
    if shift is not None:
        commands = commands.copy()
        commands[:, :2] += np.asarray(shift, dtype=np.float64)
    u, v, _, _ = _signed_frame(commands, resolution)
    a = commands[:, 3, None, None, None]
    lp = params.pad_half_length
    return np.concatenate([np.clip((np.abs(u) - a / 2) / lp, -FRAME_CLIP, FRAME_CLIP),
                           np.clip(np.abs(v) / lp, -FRAME_CLIP, FRAME_CLIP)], axis=1).astype(np.float32)


def _abs(x: Tensor) -> Tensor:
    return T.add(T.relu(x), T.relu(T.mul(x, -1.0)))


def _clip(x: Tensor, bound: float) -> Tensor:
    x = T.sub(x, T.relu(T.sub(x, bound)))
    return T.add(x, T.relu(T.sub(-bound, x)))


def intensity_profiles(images: np.ndarray) -> np.ndarray:
    """Column means followed by row means of each image, ``(N, H + W)``, standardized."""
    images = np.asarray(images, dtype=np.float64)[:, 0]
    return (np.concatenate([images.mean(axis=1), images.mean(axis=2)], axis=1) - PIXEL_MEAN) / PIXEL_STD


# networks ----------------------------------------------------------------------


def _check_images(net: Network, images: np.ndarray) -> None:
    images = np.asarray(images)
    r = int(net.hparams["resolution"])
    if images.ndim != 4 or images.shape[1:] != (1, r, r):
        raise ShapeError(f"{net.arch} expects images shaped (N, 1, {r}, {r}), got {images.shape}")


def _check_commands(images: np.ndarray, commands: np.ndarray) -> None:
    commands = np.asarray(commands)
    if commands.ndim != 2 or commands.shape != (np.asarray(images).shape[0], 4):
        raise ShapeError(f"commands must be shaped (N, 4) matching the image batch, got {commands.shape}")


# stem name -> extra halvings beyond one per conv block
STEMS = {"strided": 1, "full": 0}


class Classifier(Network):
    """Conv trunk plus dense head producing one probability per sample."""

    arch = "classifier"
    command_channels = 0

    def __init__(self, resolution: int = 64, channels: Sequence[int] = (16, 32, 64, 64),
                 hidden: int = 128, seed: int = 0, stem: str = "strided", dtype=np.float32):
        super().__init__(dtype)
        channels = tuple(int(c) for c in channels)
        if stem not in STEMS:
            raise ValueError(f"stem must be one of {sorted(STEMS)}, got {stem!r}")
        # a strided stem halves the input once more than the full-resolution one
        shrink = 2 ** (len(channels) + STEMS[stem])
        if resolution % shrink:
            raise ValueError(f"resolution {resolution} is not divisible by {shrink}")
        rng = np.random.default_rng(seed)
        self.resolution = resolution
        self.channels = channels
        self.stem = stem
        self.hparams = {"resolution": float(resolution), "channels": [float(c) for c in channels],
                        "hidden": float(hidden), "stem": float(STEMS[stem])}
        self.add_conv("conv0", 1, channels[0], 4 if stem == "strided" else 3, rng)
        cin = channels[0] + self.command_channels
        for i, cout in enumerate(channels[1:], start=1):
            self.add_conv(f"conv{i}", cin, cout, 3, rng)
            cin = cout
        side = resolution // shrink
        self.add_dense("fc", cin * side * side, hidden, rng)
        self.add_dense("out", hidden, 1, rng)
        # start at p = 0.5; with standardized pixels a random head saturates
        # the sigmoid within the first few Adam steps
        self.params["out.w"].data[:] = 0

    def _pixels(self, images) -> Tensor:
        # fixed standardization; raw intensities have a std of about 0.14
        return self.input((np.asarray(images, dtype=self.dtype) - PIXEL_MEAN) / PIXEL_STD)

    def _stem(self, x: Tensor) -> Tensor:
        stride = 2 if self.stem == "strided" else 1
        return T.maxpool2x2(T.relu(T.conv2d(x, self.params["conv0.w"], self.params["conv0.b"], stride, 1)))

    def _rest(self, x: Tensor) -> Tensor:
        for i in range(1, len(self.channels)):
            x = T.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], 1, 1)
            x = T.maxpool2x2(T.relu(x))
        x = T.relu(T.dense(T.flatten(x), self.params["fc.w"], self.params["fc.b"]))
        x = T.dense(x, self.params["out.w"], self.params["out.b"])
        return T.reshape(T.sigmoid(x), (x.shape[0],))


class SurrogateNet(Classifier):
    """Success probability from a single observation (real or generated)."""

    arch = "surrogate"

    def forward(self, images) -> Tensor:
        _check_images(self, images)
        return self._rest(self._stem(self._pixels(images)))


class ModelFreeNet(Classifier):
    """Success probability from the before image and the command."""

    arch = "model-free"
    command_channels = ENCODING_SIZE

    def __init__(self, *args, params: WorldParams = WorldParams(), **kwargs):
        super().__init__(*args, **kwargs)
        self.world = params

    def forward(self, images, commands) -> Tensor:
        _check_images(self, images)
        _check_commands(images, commands)
        x = self._stem(self._pixels(images))
        enc = self.input(encode_commands(commands, self.world))
        x = T.concat_channels(x, T.tile_vector_to_channels(enc, x.shape[2], x.shape[3]))
        return self._rest(x)


class PredictiveNet(Network):
    """Generates the during image from the before image and a command."""

    arch = "predictive"

    def __init__(self, resolution: int = 64, encoder: Sequence[int] = (8, 16), bottleneck: int = 8,
                 head: int = 16, shift_hidden: int = 32, seed: int = 0, params: WorldParams = WorldParams(),
                 dtype=np.float32):
        super().__init__(dtype)
        encoder = tuple(int(c) for c in encoder)
        if len(encoder) != 2 or resolution % 4:
            raise ValueError("encoder takes two channel counts and resolution must be divisible by 4")
        rng = np.random.default_rng(seed)
        self.resolution = resolution
        self.world = params
        self.hparams = {"resolution": float(resolution), "encoder": [float(c) for c in encoder],
                        "bottleneck": float(bottleneck), "head": float(head),
                        "shift_hidden": float(shift_hidden)}
        self.add_conv("enc0", 1, encoder[0], 4, rng)
        self.add_conv("enc1", encoder[0], encoder[1], 3, rng)
        self.add_conv("mid", encoder[1] + ENCODING_SIZE + 2, bottleneck, 3, rng)
        self.add_dense("shift0", 2 * resolution, shift_hidden, rng)
        self.add_dense("shift1", shift_hidden, 2, rng)
        self.add_conv("head0", bottleneck + FRAME_PLANES, head, 1, rng)
        self.add_conv("head1", head, head, 1, rng)
        self.add_conv("out", head, 2, 1, rng)
        # The shift branch starts at zero so the frame planes begin unshifted.
        self.params["shift1.w"].data[:] = 0
        # Start with the skip path mostly open (m ~ 0.95) and a bright generator
        # (g ~ 0.88). From m = g = 0.5 the generator first fits the background,
        # which removes the mask's incentive to open at gripper pixels and the
        # mask saturates to 1 everywhere.
        self.params["out.b"].data[:] = np.array([2.0, 3.0], dtype=self.dtype)

    def _coords(self, n: int, side: int) -> np.ndarray:
        centre = 0.5 * (self.world.bin_min + self.world.bin_max)
        px = ((np.arange(side) + 0.5) / side - centre) / (0.5 * self.world.bin_extent)
        out = np.empty((n, side, side, 2), dtype=self.dtype)
        out[..., 0] = px[None, None, :]
        out[..., 1] = px[None, :, None]
        return out.transpose(0, 3, 1, 2)

    def content_shift(self, images) -> Tensor:
        """Estimated ``(N, 2)`` offset of the image content, in world units."""
        p = self.params
        h = T.relu(T.dense(self.input(intensity_profiles(images)), p["shift0.w"], p["shift0.b"]))
        return T.mul(T.dense(h, p["shift1.w"], p["shift1.b"]), self.world.jitter_max)

    def frame(self, images, commands) -> Tensor:
        """:func:`command_frame` with the learned content shift, built in the graph."""
        commands = np.asarray(commands, dtype=np.float64)
        n = commands.shape[0]
        u, v, s, co = _signed_frame(commands, self.resolution)
        s, co = s.reshape(n, 1), co.reshape(n, 1)
        shift = self.content_shift(images)
        ones, zero = self.input(np.ones((1, 2))), self.input(np.zeros(1))
        # moving the content by (sx, sy) moves u by s*sx - c*sy and v by -c*sx - s*sy
        du = T.dense(T.mul(shift, self.input(np.concatenate([s, -co], axis=1))), ones, zero)
        dv = T.dense(T.mul(shift, self.input(np.concatenate([-co, -s], axis=1))), ones, zero)
        u = T.add(self.input(u), T.reshape(du, (n, 1, 1, 1)))
        v = T.add(self.input(v), T.reshape(dv, (n, 1, 1, 1)))
        lp = self.world.pad_half_length
        half = self.input(commands[:, 3].reshape(n, 1, 1, 1) / 2)
        p0 = _clip(T.mul(T.sub(_abs(u), half), 1.0 / lp), FRAME_CLIP)
        p1 = _clip(T.mul(_abs(v), 1.0 / lp), FRAME_CLIP)
        return T.concat_channels(p0, p1)

    def layers(self, images, commands) -> tuple[Tensor, Tensor, Tensor]:
        """Returns ``(g, m, before)`` tensors, each ``(N, 1, H, W)``."""
        _check_images(self, images)
        _check_commands(images, commands)
        p = self.params
        before = self.input(images)
        n = before.shape[0]
        x = T.relu(T.conv2d(before, p["enc0.w"], p["enc0.b"], 2, 1))
        x = T.maxpool2x2(T.relu(T.conv2d(x, p["enc1.w"], p["enc1.b"], 1, 1)))
        side = x.shape[2]
        enc = self.input(encode_commands(commands, self.world))
        x = T.concat_channels(x, T.tile_vector_to_channels(enc, side, side))
        x = T.concat_channels(x, self.input(self._coords(n, side)))
        x = T.relu(T.conv2d(x, p["mid.w"], p["mid.b"], 1, 1))
        x = T.upsample2x(T.upsample2x(x))
        x = T.concat_channels(x, self.frame(images, commands))
        x = T.relu(T.conv2d(x, p["head0.w"], p["head0.b"], 1, 0))
        x = T.relu(T.conv2d(x, p["head1.w"], p["head1.b"], 1, 0))
        x = T.sigmoid(T.conv2d(x, p["out.w"], p["out.b"], 1, 0))
        return T.take_channels(x, 0, 1), T.take_channels(x, 1, 2), before

    def forward(self, images, commands, mask: Optional[float] = None) -> Tensor:
        g, m, before = self.layers(images, commands)
        if mask is not None:
            m = self.input(np.full(m.shape, mask))
        return T.add(T.mul(m, before), T.mul(T.sub(1.0, m), g))


# forward helpers ---------------------------------------------------------------


class Prediction(NamedTuple):
    during: np.ndarray
    mask: np.ndarray
    generated: np.ndarray


def _batched(fn, n: int, batch: int):
    return [fn(slice(i, min(n, i + batch))) for i in range(0, n, batch)]


def modelfree_forward(net: ModelFreeNet, before, commands, batch: int = 256) -> np.ndarray:
    before, commands = np.asarray(before), np.asarray(commands)
    out = _batched(lambda s: net.forward(before[s], commands[s]).data, len(before), batch)
    return np.concatenate(out) if out else np.zeros(0, dtype=net.dtype)


def surrogate_forward(net: SurrogateNet, images, batch: int = 256) -> np.ndarray:
    images = np.asarray(images)
    out = _batched(lambda s: net.forward(images[s]).data, len(images), batch)
    return np.concatenate(out) if out else np.zeros(0, dtype=net.dtype)


def predictive_forward(net: PredictiveNet, before, commands, mask: Optional[float] = None,
                       batch: int = 256) -> Prediction:
    """Generated during image plus the compositing mask and the raw generation."""
    before, commands = np.asarray(before), np.asarray(commands)

    def run(s):
        g, m, b = net.layers(before[s], commands[s])
        mv = np.full(m.shape, mask, dtype=net.dtype) if mask is not None else m.data
        return mv * b.data + (1 - mv) * g.data, mv, g.data

    parts = _batched(run, len(before), batch)
    if not parts:
        z = np.zeros((0, 1, net.resolution, net.resolution), dtype=net.dtype)
        return Prediction(z, z, z)
    return Prediction(*(np.concatenate(p) for p in zip(*parts)))


@dataclass
class PipelineModel:
    predictor: PredictiveNet
    estimator: SurrogateNet


def pipeline_forward(pipeline: PipelineModel, before, commands, batch: int = 256) -> np.ndarray:
    """Success probability from the before image and command only."""
    generated = predictive_forward(pipeline.predictor, before, commands, batch=batch).during
    return surrogate_forward(pipeline.estimator, generated, batch)


def zero_head(net: Classifier) -> Classifier:
    net.params["out.w"].data[:] = 0
    net.params["out.b"].data[:] = 0
    return net


# predictor quality -------------------------------------------------------------


def gripper_template(c: GraspCommand, resolution: int, params: WorldParams = WorldParams()) -> np.ndarray:
    """Zero-mean gripper sprite for ``c``'s angle and aperture, centred in the frame."""
    t = ws.gripper_coverage(GraspCommand(0.5, 0.5, c.theta, c.aperture), resolution, params)
    return t - t.mean()


def gripper_placement_error(generated: np.ndarray, before: np.ndarray, c: GraspCommand,
                            jitter: ws.Vec2, params: WorldParams = WorldParams()) -> float:
    """Pixel distance between the template-correlation peak and the commanded pose.

    The template is correlated with ``generated - before`` so bright objects do
    not compete with the sprite; the commanded pose includes the camera jitter.
    """
    generated = np.asarray(generated, dtype=np.float64).reshape(before.shape)
    r = before.shape[-1]
    x = generated - np.asarray(before, dtype=np.float64)
    corr = signal.correlate(x - x.mean(), gripper_template(c, r, params), mode="same", method="fft")
    row, col = np.unravel_index(np.argmax(corr), corr.shape)
    return math.hypot(row - r // 2 - (c.y + jitter.y - 0.5) * r, col - r // 2 - (c.x + jitter.x - 0.5) * r)


def background_mse(generated: np.ndarray, during: np.ndarray, c: GraspCommand, jitter: ws.Vec2,
                   params: WorldParams = WorldParams(), margin: int = 5) -> float:
    """MSE over pixels at least ``margin`` pixels away from the true gripper footprint."""
    during = np.asarray(during, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64).reshape(during.shape)
    footprint = ws.gripper_coverage(c, during.shape[-1], params, jitter) > 0
    far = ndimage.distance_transform_edt(~footprint) >= margin
    return float(((generated - during) ** 2)[far].mean())


# checkpoints -------------------------------------------------------------------

ARCHITECTURES = {"model-free": ModelFreeNet, "surrogate": SurrogateNet, "predictive": PredictiveNet}


def build_network(arch: str, hparams: dict, params: WorldParams = WorldParams()) -> Network:
    """Fresh network of the named architecture from stored hyperparameters."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}")

    def num(key):
        return int(np.asarray(hparams[key]).reshape(-1)[0])

    def ints(key):
        return tuple(int(v) for v in np.asarray(hparams[key]).reshape(-1))

    try:
        if arch == "predictive":
            return PredictiveNet(num("resolution"), ints("encoder"), num("bottleneck"), num("head"),
                                 num("shift_hidden"), params=params)
        stems = {v: k for k, v in STEMS.items()}
        kwargs = {"params": params} if arch == "model-free" else {}
        return ARCHITECTURES[arch](num("resolution"), ints("channels"), num("hidden"),
                                   stem=stems[num("stem")], **kwargs)
    except KeyError as exc:
        raise ValueError(f"{arch} checkpoint is missing hyperparameter {exc}") from None


def save_model(net: Network, path) -> int:
    return checkpoint.save_checkpoint(net, path)


def load_model(path, params: WorldParams = WorldParams()) -> Network:
    """Rebuild a network from a checkpoint written by :func:`save_model`."""
    tensors = checkpoint.load_checkpoint(path)
    arch, hparams = checkpoint.checkpoint_arch(tensors)
    return checkpoint.load_into(build_network(arch, hparams, params), tensors)
