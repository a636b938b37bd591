"""Property-based checks of the structural invariants of every module."""

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import identity_model
from idr.config import ExperimentConfig, parse_config
from idr.dataset import (
    NoisyImages,
    RawHeader,
    TargetStore,
    make_noisier_noisy,
    read_raw,
    refine_targets,
    sample_corners,
    write_raw,
)
from idr.metrics import psnr, ssim
from idr.model import ModelConfig, TrainingState, build_unet, denoise, train_step
from idr.noise import (
    BinomialSpec,
    CorrelatedSpec,
    GaussianSpec,
    ImpulseSpec,
    PoissonGaussianSpec,
    RngStream,
    named_kernel,
)
from idr.tensor import AdamState, Tensor, adam_step, conv2d, l1_loss, maxpool2, total, upsample2

PROPS = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
seeds = st.integers(0, 2**32 - 1)
unit = st.floats(0.0, 1.0, allow_nan=False)


def image(h=st.integers(4, 12), w=st.integers(4, 12), c=st.sampled_from([1, 3])):
    return st.tuples(h, w, c).flatmap(lambda s: arrays(np.float64, s, elements=unit))


# -- tensor core ----------------------------------------------------------------------

@PROPS
@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 3]))
    kern = Tensor(rng.normal(size=(2, 3, k, k)))
    x, y = rng.normal(size=(2, 1, 3, 5, 6))
    lhs = conv2d(Tensor(a * x + b * y), kern).data
    rhs = a * conv2d(Tensor(x), kern).data + b * conv2d(Tensor(y), kern).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + abs(a) + abs(b)) * 50)


@PROPS
@given(st.floats(-5, 5, allow_nan=False), st.integers(1, 4), st.integers(1, 4))
def test_pool_of_upsample_on_constant_is_identity(value, h, w):
    x = np.full((1, 2, 2 * h, 2 * w), value)
    np.testing.assert_array_equal(maxpool2(upsample2(Tensor(x))).data, x)


@PROPS
@given(seeds)
def test_l1_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 1, 1, 4, 4))
    ab = l1_loss(Tensor(a), b).data
    assert ab == l1_loss(Tensor(b), a).data and ab > 0
    assert l1_loss(Tensor(a), a).data == 0


@PROPS
@given(seeds, st.integers(0, 5))
def test_adam_zero_gradient_never_moves(seed, warmup):
    rng = np.random.default_rng(seed)
    p = Tensor(rng.normal(size=(3, 4)))
    state = AdamState(lr=1e-2)
    for _ in range(warmup):
        adam_step([p], [rng.normal(size=p.shape)], state)
        assert state.v[0].min() >= 0
    before, t = p.data.copy(), state.t
    adam_step([p], [np.zeros(p.shape)], state)
    assert state.t == t + 1
    np.testing.assert_array_equal(p.data, before)
    assert state.m[0].shape == state.v[0].shape == p.shape


@PROPS
@given(seeds)
def test_gradient_shapes_match_leaves(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    total(upsample2(maxpool2(conv2d(x, k)))).backward()
    assert x.grad.shape == x.shape and k.grad.shape == k.shape
    assert np.isfinite(x.grad).all()


# -- model ------------------------------------------------------------------------

_NET = build_unet(ModelConfig(levels=2, base_channels=4, seed=5))


@PROPS
@given(arrays(np.float32, (8, 12, 1), elements=st.floats(0, 1, width=32)))
def test_forward_deterministic_and_shape_preserving(x):
    a, b = denoise(_NET, [x])[0], denoise(_NET, [x])[0]
    assert a.tobytes() == b.tobytes() and a.shape == x.shape


@PROPS
@given(seeds)
def test_zero_lr_step_is_pure(seed):
    rng = np.random.default_rng(seed)
    net = build_unet(ModelConfig(levels=2, base_channels=2, seed=seed % 1000))
    digest = net.digest()
    state = TrainingState()
    state.lr = 0.0
    x = rng.random((2, 1, 8, 8), dtype=np.float32)
    y = rng.random((2, 1, 8, 8), dtype=np.float32)
    assert train_step(net, state, x, y) == train_step(net, state, x, y)
    assert net.digest() == digest and state.iteration == 2


# -- noise --------------------------------------------------------------------------

SPECS = [
    GaussianSpec((0, 30)),
    PoissonGaussianSpec(iso_range=(800, 3200)),
    BinomialSpec((0.0, 0.95)),
    ImpulseSpec((0.0, 0.95)),
    CorrelatedSpec((0, 10), named_kernel("gauss3"), "gauss3"),
]


@PROPS
@given(st.sampled_from(SPECS), image(), seeds, st.integers(0, 1000))
def test_samplers_pure_and_replayable(spec, img, seed, stream):
    keep = img.copy()
    level = spec.sample_level(RngStream(seed, stream))
    a = spec.apply(img, level, RngStream(seed, stream))
    b = spec.apply(img, level, RngStream(seed, stream))
    assert a.tobytes() == b.tobytes()
    assert a.shape == img.shape
    np.testing.assert_array_equal(img, keep)
    lo, hi = spec.level_range
    assert lo <= level <= hi


# -- metrics ------------------------------------------------------------------------

@PROPS
@given(image(st.just(12), st.just(12)), image(st.just(12), st.just(12)), st.floats(-0.1, 0.1))
def test_psnr_symmetric_and_shift_invariant(a, b, shift):
    assume(a.shape == b.shape)
    a, b = 0.2 + 0.6 * a, 0.2 + 0.6 * b
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a + shift, b + shift) == pytest.approx(psnr(a, b), rel=1e-9)
    if not np.array_equal(a, b):
        assert psnr(a, b) >= 0


@PROPS
@given(image(st.integers(11, 16), st.integers(11, 16), st.just(1)), seeds)
def test_ssim_symmetric_and_identity(a, seed):
    b = np.clip(a + 0.1 * np.random.default_rng(seed).normal(size=a.shape), 0, 1)
    assert ssim(a, b) == ssim(b, a)
    assert ssim(a, a) == 1.0


# -- dataset -------------------------------------------------------------------------

@PROPS
@given(st.lists(st.tuples(st.integers(8, 40), st.integers(8, 40)), min_size=1, max_size=4),
       st.integers(1, 8), seeds)
def test_patches_stay_in_bounds(shapes, patch, seed):
    for i, t, l in sample_corners(shapes, patch, 50, RngStream(seed)):
        h, w = shapes[i]
        assert 0 <= t <= h - patch and 0 <= l <= w - patch


@PROPS
@given(st.lists(image(), min_size=1, max_size=4), seeds)
def test_pairs_match_targets(targets, seed):
    pairs = make_noisier_noisy(targets, GaussianSpec((1, 25)), RngStream(seed))
    assert len(pairs) == len(targets)
    for x, t in zip(pairs.inputs, pairs.targets):
        assert x.shape == t.shape


_ID = identity_model()


@PROPS
@given(st.lists(st.tuples(st.integers(4, 24), st.integers(4, 24)), min_size=1, max_size=3), st.integers(1, 3))
def test_refinement_preserves_count_and_shapes(shapes, rounds):
    rng = np.random.default_rng(len(shapes))
    noisy = NoisyImages([rng.random((h, w, 1), dtype=np.float32) for h, w in shapes])
    store = TargetStore.initial(noisy)
    for r in range(rounds):
        store = refine_targets(_ID, noisy, store)
        assert store.round == r + 1 and len(store) == len(noisy)
        assert [t.shape for t in store.targets] == [n.shape for n in noisy]


@settings(max_examples=20, deadline=None)
@given(hw=st.integers(1, 6), ww=st.integers(1, 6), black=st.integers(0, 200), white=st.integers(300, 65535), seed=seeds)
def test_raw_payload_round_trip(tmp_path_factory, hw, ww, black, white, seed):
    h, w = 2 * hw, 2 * ww
    header = RawHeader(w, h, black=black, white=white)
    payload = np.random.default_rng(seed).integers(black, white + 1, size=(h, w)).astype("<u2")
    d = tmp_path_factory.mktemp("raw")
    (d / "a.raw").write_bytes(header.to_line().encode() + payload.tobytes())
    packed, back = read_raw(d / "a.raw")
    write_raw(packed, back, d / "b.raw")
    assert (d / "b.raw").read_bytes() == (d / "a.raw").read_bytes()


# -- config ---------------------------------------------------------------------------

@PROPS
@given(st.integers(1, 50), st.integers(0, 6), st.integers(0, 5000), st.sampled_from(["fast", "full", "baseline"]),
       st.floats(1e-6, 1e-1), st.booleans())
def test_config_round_trip(epochs, rounds, iters, mode, lr, refine):
    cfg = ExperimentConfig()
    cfg.run.mode = mode
    cfg.schedule.epochs, cfg.schedule.rounds, cfg.schedule.iters_per_epoch = epochs, rounds, iters
    cfg.schedule.lr, cfg.schedule.refine = lr, refine
    back = parse_config(cfg.to_ini())
    assert back.idr_config() == cfg.idr_config()
    assert back.to_ini() == cfg.to_ini()
