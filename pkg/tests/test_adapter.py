"""
Test suite for adapter.py
"""
from dataclasses import replace

import numpy as np
import pytest

from app.adapter import (
    AdapterModel,
    LatentStack,
    MaskSpec,
    TrainConfig,
    corrupt,
    decode,
    encode,
    fit_adapter,
    latent_stack,
    load_model,
    pool,
    run_adapter,
    save_model,
    train,
)
from app.errors import DivergenceError, FormatError
from app.seqcore import InspectionSequence, standardize


def _model(arch, seed=0):
    return AdapterModel.initialize(arch, np.random.default_rng(seed))


# --- corrupt ---

def test_corrupt_identity_without_mask_or_noise():
    """mask_ratio 0 and noise 0 return the signal unchanged"""
    signal = np.random.default_rng(0).normal(size=40)
    out, bits = corrupt(signal, MaskSpec(patch_len=8, mask_ratio=0.0, noise_std=0.0), np.random.default_rng(1))
    assert np.array_equal(out, signal)
    assert np.all(bits == 1.0)


def test_corrupt_masks_exact_patch_count():
    """16 samples in patches of 4 at ratio 0.5 zero exactly two whole patches"""
    signal = np.arange(1.0, 17.0)
    out, bits = corrupt(signal, MaskSpec(patch_len=4, mask_ratio=0.5, noise_std=0.0), np.random.default_rng(3))
    patches = bits.reshape(4, 4)
    assert np.all(patches == patches[:, :1])
    assert int((patches[:, 0] == 0).sum()) == 2
    assert np.array_equal(out, bits * signal)


def test_mask_spec_rules():
    """Full masking is rejected and one patch always stays visible"""
    with pytest.raises(ValueError):
        MaskSpec(mask_ratio=1.0)
    with pytest.raises(ValueError):
        MaskSpec(patch_len=0)
    assert MaskSpec(mask_ratio=0.9).n_masked(2) == 1
    assert MaskSpec(mask_ratio=0.5).n_masked(5) == 3


def test_corrupt_noise_scales_with_signal_std():
    """Additive noise has noise_std times the signal's own standard deviation"""
    signal = np.random.default_rng(5).normal(scale=4.0, size=20000)
    out, _ = corrupt(signal, MaskSpec(mask_ratio=0.0, noise_std=0.1), np.random.default_rng(6))
    assert np.std(out - signal) == pytest.approx(0.1 * signal.std(), rel=0.05)


def test_corrupt_rejects_non_finite():
    """Non-finite input samples are rejected"""
    with pytest.raises(ValueError):
        corrupt(np.array([0.0, np.nan]), MaskSpec(patch_len=1), np.random.default_rng(0))


# --- encode / decode ---

def test_zero_input_maps_to_zero(tiny_arch):
    """With zero biases, zero signals encode to zero and zero latents decode to zero"""
    model = _model(tiny_arch)
    assert np.all(encode(model, np.zeros(tiny_arch.input_len)) == 0.0)
    assert np.all(decode(model, np.zeros(tiny_arch.latent_dim)) == 0.0)


def test_encode_decode_shapes_and_determinism(tiny_arch):
    """Same model and input give bit-identical outputs of the right length"""
    model = _model(tiny_arch)
    x = np.random.default_rng(1).normal(size=tiny_arch.input_len)
    z = encode(model, x)
    assert z.shape == (3,)
    assert encode(model, x).tobytes() == z.tobytes()
    assert decode(model, z).shape == (tiny_arch.input_len,)
    with pytest.raises(ValueError):
        encode(model, np.zeros(tiny_arch.input_len + 1))
    with pytest.raises(ValueError):
        decode(model, np.zeros(4))


def _check_network_gradients(net, x, rng, n_probe=25, eps=1e-6):
    weights = rng.normal(size=net.forward(x).shape)
    net.backward(weights)
    params = dict(net.named_parameters())
    grads = {name: g.copy() for name, g in net.named_grads()}
    names = sorted(params)
    for _ in range(n_probe):
        name = names[rng.integers(len(names))]
        p = params[name]
        pos = np.unravel_index(rng.integers(p.size), p.shape)
        keep = p[pos]
        p[pos] = keep + eps
        up = float((net.forward(x) * weights).sum())
        p[pos] = keep - eps
        down = float((net.forward(x) * weights).sum())
        p[pos] = keep
        assert grads[name][pos] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-8), name


@pytest.mark.parametrize('seed', range(20))
def test_encoder_gradient_check(tiny_arch, seed):
    """Encoder backprop matches central differences on sampled parameters"""
    # slope 1 keeps the network free of kinks; LeakyReLU itself is checked in test_layers
    model = _model(replace(tiny_arch, leaky_slope=1.0), seed=seed)
    x = np.random.default_rng(100 + seed).normal(size=(4, tiny_arch.input_len))
    _check_network_gradients(model.encoder, x, np.random.default_rng(seed))


@pytest.mark.parametrize('seed', range(20))
def test_decoder_gradient_check(tiny_arch, seed):
    """Decoder backprop matches central differences on sampled parameters"""
    model = _model(replace(tiny_arch, leaky_slope=1.0), seed=seed)
    z = np.random.default_rng(100 + seed).normal(size=(4, tiny_arch.latent_dim))
    _check_network_gradients(model.decoder, z, np.random.default_rng(seed))


# --- train ---

def test_train_zero_epochs(small_sequence, tiny_arch, tiny_train):
    """epochs=0 returns the initialized model and an empty history"""
    model, history = train(standardize(small_sequence), replace(tiny_train, epochs=0), tiny_arch)
    assert history == []
    assert model.latent_dim == 3
    assert model.n_params() == model.flat().size


def test_train_requires_enough_pixels(random_sequence, tiny_arch):
    """Fewer pixels than one batch is an error"""
    with pytest.raises(ValueError):
        train(standardize(random_sequence), TrainConfig(batch_size=32, epochs=1, log_every=0), tiny_arch)


def test_train_reduces_loss_and_is_deterministic(small_sequence, tiny_arch, tiny_train):
    """Loss falls over training and a fixed seed reproduces the model"""
    cfg = replace(tiny_train, epochs=20, learning_rate=5e-3, max_pixels_per_epoch=128)
    std = standardize(small_sequence)
    model_a, history = train(std, cfg, tiny_arch)
    model_b, _ = train(std, cfg, tiny_arch)
    assert len(history) == 20
    assert history[-1] < history[0]
    assert np.array_equal(model_a.flat(), model_b.flat())


def test_train_latent_dim_follows_config(small_sequence, tiny_arch, tiny_train):
    """The training config's latent size overrides the architecture's"""
    model, _ = train(standardize(small_sequence), replace(tiny_train, epochs=0, latent_dim=5),
                     replace(tiny_arch, latent_dim=7))
    assert model.latent_dim == 5


def test_train_divergence_raises(small_sequence, tiny_arch, tiny_train):
    """An absurd learning rate blows the loss up and reports the epoch"""
    cfg = replace(tiny_train, epochs=10, learning_rate=1e6)
    with np.errstate(all='ignore'):
        with pytest.raises(DivergenceError) as exc:
            train(standardize(small_sequence), cfg, tiny_arch)
    assert exc.value.epoch <= 9
    assert exc.value.exit_code == 3


# --- latent stack and pooling ---

def test_latent_stack_shape_and_identical_pixels(random_sequence, tiny_arch):
    """Stack is (l, n_y, n_x) and pixels with equal signals get equal latents"""
    frames = random_sequence.frames.copy()
    frames[:, 4, 3] = frames[:, 0, 0]
    seq = InspectionSequence(frames, frame_rate_hz=10.0)
    stack = latent_stack(_model(tiny_arch), standardize(seq))
    assert stack.images.shape == (3, 6, 5)
    np.testing.assert_allclose(stack.images[:, 4, 3], stack.images[:, 0, 0], rtol=0, atol=1e-12)


def test_latent_stack_is_per_pixel(random_sequence, tiny_arch):
    """Permuting pixels then un-permuting the stack gives the same stack"""
    model = _model(tiny_arch)
    n_t, n_y, n_x = random_sequence.frames.shape
    perm = np.random.default_rng(8).permutation(n_y * n_x)
    shuffled = random_sequence.frames.reshape(n_t, -1)[:, perm].reshape(n_t, n_y, n_x)
    base = latent_stack(model, standardize(random_sequence)).images.reshape(3, -1)
    moved = latent_stack(model, standardize(InspectionSequence(shuffled, frame_rate_hz=10.0))).images
    restored = np.empty_like(base)
    restored[:, perm] = moved.reshape(3, -1)
    np.testing.assert_allclose(restored, base, rtol=0, atol=1e-12)


def test_pool_identical_channels():
    """Identical channels: avg and max return the image, pca a positive multiple of it centred"""
    image = np.random.default_rng(0).exponential(size=(6, 7))
    stack = LatentStack(np.stack([image] * 3))
    np.testing.assert_allclose(pool(stack, 'avg').pixels, image, atol=1e-12)
    assert np.array_equal(pool(stack, 'max').pixels, image)
    pca = pool(stack, 'pca').pixels.ravel()
    centred = image.ravel() - image.mean()
    assert pca @ centred / (np.linalg.norm(pca) * np.linalg.norm(centred)) > 0.999999


def test_pool_arithmetic_and_symmetry():
    """Two channels (1, 3) pool to 2 and 3, avg ignores channel order, max >= avg"""
    stack = LatentStack(np.stack([np.ones((2, 2)), np.full((2, 2), 3.0)]))
    assert np.all(pool(stack, 'avg').pixels == 2.0)
    assert np.all(pool(stack, 'max').pixels == 3.0)
    images = np.random.default_rng(1).normal(size=(4, 5, 5))
    avg = pool(LatentStack(images), 'avg').pixels
    np.testing.assert_allclose(pool(LatentStack(images[::-1].copy()), 'avg').pixels, avg, atol=1e-12)
    np.testing.assert_allclose(avg, images.mean(axis=0), atol=1e-12)
    assert np.all(pool(LatentStack(images), 'max').pixels >= avg)
    with pytest.raises(ValueError):
        pool(LatentStack(images), 'median')


# --- end to end and checkpoint ---

def test_run_adapter_is_deterministic(small_sequence, tiny_arch, tiny_train):
    """A fixed seed gives a bit-identical aligned image with provenance"""
    a = run_adapter(small_sequence, tiny_train, 'avg', tiny_arch)
    b = run_adapter(small_sequence, tiny_train, 'avg', tiny_arch)
    assert a.pixels.shape == (32, 32)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.provenance['pooling'] == 'avg'
    assert a.provenance['epochs'] == 3 and a.provenance['seed'] == 0
    with pytest.raises(ValueError):
        run_adapter(small_sequence, tiny_train, 'sum', tiny_arch)


def test_checkpoint_round_trip(tmp_path, small_sequence, tiny_arch, tiny_train):
    """A saved model loads back with identical parameters and latents"""
    fit = fit_adapter(small_sequence, tiny_train, tiny_arch)
    path = tmp_path / 'model.avlm'
    save_model(fit.model, path)
    loaded = load_model(path)
    assert loaded.arch == fit.model.arch
    assert loaded.input_scale == fit.model.input_scale
    assert np.array_equal(loaded.flat(), fit.model.flat())
    restacked = latent_stack(loaded, standardize(small_sequence))
    assert np.array_equal(restacked.images, fit.stack.images)


def test_checkpoint_format_errors(tmp_path, tiny_arch):
    """Bad magic and truncated payloads are format errors with offsets"""
    path = tmp_path / 'model.avlm'
    save_model(_model(tiny_arch), path)
    data = path.read_bytes()
    path.write_bytes(b'XXXX' + data[4:])
    with pytest.raises(FormatError) as exc:
        load_model(path)
    assert exc.value.offset == 0
    path.write_bytes(data[:-2])
    with pytest.raises(FormatError):
        load_model(path)
    path.write_bytes(data[:5])
    with pytest.raises(FormatError):
        load_model(path)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
