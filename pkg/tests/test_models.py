import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graspsight import dataio, models
from graspsight import worldsim as ws
from graspsight.models import ModelFreeNet, PredictiveNet, SurrogateNet
from graspsight.tensornet import tensor as T
from graspsight.tensornet.gradcheck import grad_check
from graspsight.tensornet.tensor import ShapeError
from graspsight.worldsim import GraspCommand, WorldParams

P = WorldParams()


def batch(n, resolution=64, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (n, 1, resolution, resolution)).astype(np.float32)
    commands = np.stack([rng.uniform(0.1, 0.9, n), rng.uniform(0.1, 0.9, n),
                         rng.uniform(-math.pi / 2, math.pi / 2, n), rng.uniform(0.01, P.a_max, n)], axis=1)
    return images, commands


# --------------------------------------------------------------------------
# command encoding


def test_encoding_examples():
    centre = models.encode_command(GraspCommand(0.5, 0.5, 0.0, P.a_max))
    assert centre == pytest.approx([0.0, 0.0, 0.0, 1.0, 1.0])
    corner = models.encode_command(GraspCommand(P.bin_min, P.bin_max, math.pi / 2 - 1e-12, P.a_max / 2))
    assert corner == pytest.approx([-1.0, 1.0, 1.0, 0.0, 0.5], abs=1e-9)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(-math.pi / 2, math.pi / 2), st.floats(0, 0.3))
def test_encoding_is_bounded(x, y, theta, a):
    e = models.encode_command(GraspCommand(x, y, theta, a))
    assert e.shape == (models.ENCODING_SIZE,)
    assert np.all(np.abs(e) <= 1.0)


def test_frame_is_zero_at_the_fingertips():
    c = GraspCommand(0.5, 0.5, 0.4, 0.15)
    planes = models.command_frame(np.array([[c.x, c.y, c.theta, c.aperture]]), 256)[0]
    for tip in ws.fingertips(c):
        col, row = int(tip.x * 256), int(tip.y * 256)
        assert abs(planes[0, row, col]) < 2 / 256 / P.pad_half_length
        assert planes[1, row, col] < 2 / 256 / P.pad_half_length
    assert planes.min() >= -models.FRAME_CLIP and planes.max() <= models.FRAME_CLIP


def test_learned_frame_matches_the_reference():
    images, commands = batch(5, 16, seed=3)
    net = PredictiveNet(16, (2, 2), 2, 4, 3, seed=1)
    rng = np.random.default_rng(0)
    for name in ("shift0.w", "shift1.w", "shift1.b"):
        net.params[name].data[:] = rng.normal(0, 0.5, net.params[name].shape)
    shift = net.content_shift(images).data
    assert np.any(shift != 0)
    ref = models.command_frame(commands, 16, P, shift=shift)
    assert np.max(np.abs(net.frame(images, commands).data - ref)) < 1e-5


def test_profiles_shape():
    images, _ = batch(3, 16)
    assert models.intensity_profiles(images).shape == (3, 32)


# --------------------------------------------------------------------------
# classifiers


@pytest.mark.parametrize("stem", sorted(models.STEMS))
def test_classifier_outputs_are_probabilities(stem):
    images, commands = batch(6)
    rng = np.random.default_rng(1)
    for net, out in ((SurrogateNet(seed=1, stem=stem), None), (ModelFreeNet(seed=2, stem=stem), commands)):
        for p in net.parameters():
            p.data[:] = rng.normal(0, 0.05, p.shape)
        y = net.forward(images) if out is None else net.forward(images, commands)
        assert y.shape == (6,)
        assert np.all((y.data > 0) & (y.data < 1))


def test_fresh_classifier_predicts_one_half():
    images, commands = batch(4)
    assert np.all(SurrogateNet(seed=4).forward(images).data == 0.5)
    net = models.zero_head(ModelFreeNet(seed=5))
    assert np.all(net.forward(images, commands).data == 0.5)


def test_classifier_rejects_bad_shapes():
    images, commands = batch(2)
    with pytest.raises(ShapeError):
        SurrogateNet().forward(images[:, :, :32, :32])
    with pytest.raises(ShapeError):
        SurrogateNet().forward(images[:, 0])
    with pytest.raises(ShapeError):
        ModelFreeNet().forward(images, commands[:1])
    with pytest.raises(ValueError):
        SurrogateNet(resolution=40)
    with pytest.raises(ValueError):
        SurrogateNet(stem="dilated")


# --------------------------------------------------------------------------
# predictor


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_of_one_returns_the_before_image(seed):
    rng = np.random.default_rng(seed)
    net = PredictiveNet(16, (4, 4), 4, 8, 4, seed=seed % 1000)
    for p in net.parameters():
        p.data[:] = rng.normal(0, 2.0, p.shape)
    images, commands = batch(3, 16, seed)
    out = net.forward(images, commands, mask=1.0).data
    assert np.array_equal(out, images)
    assert np.array_equal(models.predictive_forward(net, images, commands, mask=1.0).during, images)


def test_mask_of_zero_returns_the_generation():
    images, commands = batch(2, 16)
    net = PredictiveNet(16, (4, 4), 4, 8, seed=2)
    pred = models.predictive_forward(net, images, commands, mask=0.0)
    assert np.allclose(pred.during, pred.generated, atol=1e-7)
    g, _, _ = net.layers(images, commands)
    assert np.allclose(pred.generated, g.data)


def test_prediction_stays_in_the_unit_interval():
    images, commands = batch(4, 64, seed=9)
    pred = models.predictive_forward(PredictiveNet(seed=3), images, commands)
    assert pred.during.shape == images.shape
    assert pred.during.min() >= 0 and pred.during.max() <= 1
    # the initial mask mostly keeps the before image
    assert pred.mask.mean() > 0.9


def test_predictor_shape_audit():
    images, commands = batch(2)
    g, m, b = PredictiveNet(seed=1).layers(images, commands)
    assert g.shape == m.shape == b.shape == (2, 1, 64, 64)
    with pytest.raises(ShapeError):
        PredictiveNet().forward(images, commands[:, :3])


def test_pipeline_reads_only_before_and_command():
    images, commands = batch(3)
    pipe = models.PipelineModel(PredictiveNet(seed=1), SurrogateNet(seed=2))
    p = models.pipeline_forward(pipe, images, commands)
    assert p.shape == (3,) and np.all(p == 0.5)


# --------------------------------------------------------------------------
# gradients and checkpoints


def _tiny_nets():
    yield SurrogateNet(16, (2, 3), 4, seed=1, stem="full"), False
    yield SurrogateNet(16, (2, 3), 4, seed=2, stem="strided"), False
    yield ModelFreeNet(16, (2, 3), 4, seed=3), True


@pytest.mark.parametrize("index", range(3))
def test_classifier_gradients(index):
    net, with_commands = list(_tiny_nets())[index]
    net.astype(np.float64)
    rng = np.random.default_rng(index)
    for p in net.parameters():
        p.data[:] = rng.normal(0, 0.5, p.shape)
    images, commands = batch(3, 16, seed=index)
    labels = np.array([0.0, 1.0, 1.0])

    def loss(n):
        y = n.forward(images, commands) if with_commands else n.forward(images)
        return T.bce_loss(y, labels)

    assert grad_check(net, loss) < 1e-4


def test_predictor_gradients():
    net = PredictiveNet(8, (2, 2), 2, 3, 3, seed=5).astype(np.float64)
    rng = np.random.default_rng(5)
    for p in net.parameters():
        p.data[:] = rng.normal(0, 0.5, p.shape)
    images, commands = batch(2, 8, seed=5)
    images = images.astype(np.float64)
    target = np.random.default_rng(6).uniform(0, 1, images.shape)
    assert grad_check(net, lambda n: T.mse_loss(n.forward(images, commands), target)) < 1e-4


@pytest.mark.parametrize("make", [lambda: SurrogateNet(seed=1), lambda: ModelFreeNet(seed=2, stem="strided"),
                                  lambda: PredictiveNet(seed=3)])
def test_checkpoint_roundtrip(make, tmp_path):
    net = make()
    rng = np.random.default_rng(0)
    for p in net.parameters():
        p.data[:] = rng.normal(0, 0.1, p.shape)
    path = tmp_path / "net.ckpt"
    models.save_model(net, path)
    assert path.read_bytes()[:4] == b"GSPT"
    back = models.load_model(path)
    assert type(back) is type(net) and back.hparams == net.hparams
    for name, p in net.params.items():
        assert np.array_equal(p.data, back.params[name].data)
    images, commands = batch(2)
    args = (images,) if isinstance(net, SurrogateNet) else (images, commands)
    assert np.array_equal(net.forward(*args).data, back.forward(*args).data)


def test_unknown_architecture():
    with pytest.raises(ValueError):
        models.build_network("transformer", {})


# --------------------------------------------------------------------------
# predictor quality metrics


def test_metrics_on_ground_truth():
    gen = dataio.GenParams()
    for i in range(12):
        scene, c = dataio.regenerate_scene(2, i, P, gen)
        before, during = ws.render_before(scene, 64, P), ws.render_during(scene, c, 64, P)
        assert models.gripper_placement_error(during, before, c, scene.camera_jitter, P) <= 1.5
        assert models.background_mse(during, during, c, scene.camera_jitter, P) == 0.0


def test_misplaced_sprite_is_detected():
    scene = ws.Scene((), ws.Vec2(0.0, 0.0))
    c = GraspCommand(0.3, 0.3, 0.2, 0.15)
    wrong = ws.render_during(scene, GraspCommand(0.7, 0.6, 0.2, 0.15), 64, P)
    before = ws.render_before(scene, 64, P)
    assert models.gripper_placement_error(wrong, before, c, scene.camera_jitter, P) > 20


def test_background_mse_ignores_the_gripper_neighbourhood():
    scene, c = dataio.regenerate_scene(2, 0, P, dataio.GenParams())
    before, during = ws.render_before(scene, 64, P), ws.render_during(scene, c, 64, P)
    # predicting the before image only errs under the sprite
    assert models.background_mse(before, during, c, scene.camera_jitter, P) == 0.0
    noisy = during + 0.2
    assert models.background_mse(noisy, during, c, scene.camera_jitter, P) == pytest.approx(0.04)
