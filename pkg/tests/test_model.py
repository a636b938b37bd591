import numpy as np
import pytest

from conftest import identity_model
from gradcases import unet_case
from idr.model import (
    ModelConfig,
    TrainingState,
    build_unet,
    denoise,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
    train_step,
)
from idr.tensor import CheckpointError, NumericError, ShapeError, Tensor


def test_same_seed_same_parameters():
    a = build_unet(ModelConfig(seed=7))
    b = build_unet(ModelConfig(seed=7))
    c = build_unet(ModelConfig(seed=8))
    assert a.digest() == b.digest()
    assert all(x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a.named_arrays(), b.named_arrays()))
    assert a.digest() != c.digest()


def test_default_shape_48():
    model = build_unet(ModelConfig(levels=3, base_channels=16, in_channels=1))
    out = model(Tensor(np.zeros((1, 1, 48, 48), np.float32)))
    assert out.shape == (1, 1, 48, 48)


@pytest.mark.parametrize("channels", [1, 3, 4])
def test_output_channels_match_input(channels, rng):
    model = build_unet(ModelConfig(in_channels=channels, base_channels=4))
    out = denoise(model, [rng.random((16, 24, channels), dtype=np.float32)])[0]
    assert out.shape == (16, 24, channels)
    assert np.isfinite(out).all()


def test_alignment_error_names_multiple():
    model = build_unet(ModelConfig(levels=3))
    with pytest.raises(ShapeError, match="multiples of 4"):
        model(Tensor(np.zeros((1, 1, 10, 12), np.float32)))
    with pytest.raises(ShapeError):
        denoise(model, [np.zeros((12, 12, 3), np.float32)])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(in_channels=2)
    with pytest.raises(ValueError):
        ModelConfig(levels=0)
    with pytest.raises(ValueError):
        ModelConfig(slope=1.0)


def test_batch_equals_single_calls(rng):
    model = build_unet(ModelConfig(seed=3))
    images = [rng.random((32, 40, 1), dtype=np.float32) for _ in range(5)]
    batched = denoise(model, images)
    for im, out in zip(images, batched):
        assert denoise(model, [im])[0].tobytes() == out.tobytes()


def test_forward_deterministic(rng):
    model = build_unet(ModelConfig(seed=1))
    x = Tensor(rng.random((2, 1, 16, 16), dtype=np.float32))
    assert model(x).data.tobytes() == model(x).data.tobytes()


def test_translation_equivariance(rng):
    model = build_unet(ModelConfig(seed=2))
    stride = model.config.alignment
    big = rng.random((1, 1, 56, 56), dtype=np.float32)
    a = model(Tensor(np.ascontiguousarray(big[:, :, :48, :48]))).data
    b = model(Tensor(np.ascontiguousarray(big[:, :, stride:48 + stride, stride:48 + stride]))).data
    band = 12  # beyond the receptive-field reach of the zero padding
    inner_a = a[:, :, stride + band:48 - band, stride + band:48 - band]
    inner_b = b[:, :, band:48 - band - stride, band:48 - band - stride]
    np.testing.assert_allclose(inner_a, inner_b, atol=1e-5)


def test_identity_double_passes_input(rng):
    model = identity_model(channels=3)
    x = rng.random((16, 16, 3), dtype=np.float32)
    np.testing.assert_array_equal(denoise(model, [x])[0], x)


def test_default_width_gradient_check():
    err, _ = unet_case(0, base=16)
    assert err < 1e-4


# -- training step ---------------------------------------------------------------

def _batch(rng, n=4, size=16):
    y = rng.random((n, 1, size, size), dtype=np.float32)
    x = y + rng.normal(scale=0.1, size=y.shape).astype(np.float32)
    return x, y


def test_overfit_single_batch_strictly_decreases(rng):
    model = build_unet(ModelConfig(seed=0, base_channels=8))
    state = TrainingState()
    x, y = _batch(rng)
    losses = [train_step(model, state, x, y) for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
    assert state.iteration == 50


def test_near_identity_fixed_point(rng):
    model = identity_model(base=4)
    for t in model.params.values():
        t.data += rng.normal(scale=1e-3, size=t.shape).astype(np.float32)
    x = rng.random((4, 1, 16, 16), dtype=np.float32)
    state = TrainingState()
    state.lr = 1e-4
    losses = [train_step(model, state, x, x) for _ in range(20)]
    assert losses[0] < 0.01
    assert losses[-1] < losses[0]


def test_zero_lr_changes_nothing_but_counter(rng):
    model = build_unet(ModelConfig(seed=4, base_channels=4))
    before = model.digest()
    state = TrainingState()
    state.lr = 0.0
    x, y = _batch(rng)
    first = train_step(model, state, x, y)
    second = train_step(model, state, x, y)
    assert model.digest() == before
    assert first == second
    assert state.iteration == 2 and state.adam.t == 2
    assert not any(m.any() for m in state.adam.m)


def test_train_step_numeric_error_names_iteration(rng):
    model = build_unet(ModelConfig(base_channels=4))
    state = TrainingState(iteration=17)
    x, y = _batch(rng)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="iteration 17"):
        train_step(model, state, x, y)


def test_train_step_shape_mismatch(rng):
    model = build_unet(ModelConfig(base_channels=4))
    x, y = _batch(rng)
    with pytest.raises(ShapeError):
        train_step(model, TrainingState(), x, y[:2])


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    model = build_unet(ModelConfig(seed=5, in_channels=3, base_channels=8))
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert back.config == model.config
    assert to_bytes(back) == path.read_bytes()
    x = Tensor(rng.random((1, 3, 16, 16), dtype=np.float32))
    assert back(x).data.tobytes() == model(x).data.tobytes()


def test_checkpoint_wrong_magic(tmp_path):
    blob = to_bytes(build_unet(ModelConfig(base_channels=4)))
    (tmp_path / "bad.ckpt").write_bytes(b"GARBAGE!" + blob[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_config_mismatch():
    from idr.tensor import decode_tensors, encode_tensors

    named, extra = decode_tensors(to_bytes(build_unet(ModelConfig(base_channels=4))))
    wrong = extra.replace(b'"levels": 3', b'"levels": 2')
    with pytest.raises(ValueError, match="do not match"):
        from_bytes(encode_tensors(named, wrong))
