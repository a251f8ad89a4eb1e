"""Encoder, decoder and pose heads."""

from __future__ import annotations

import numpy as np
import pytest

from supnerf.errors import InvalidArgumentError, ShapeError
from supnerf.gradengine import Parameter, Tensor, grad_check
from supnerf.nets import MlpSpec, NerfDecoder, SupNerfModel, positional_encoding
from supnerf.settings import RefinerConfig


@pytest.fixture
def model(tiny_net) -> SupNerfModel:
    return SupNerfModel(tiny_net, RefinerConfig())


def test_encoder_on_blank_input_is_finite(model, tiny_net):
    out = model.encoder(np.zeros((128, 128, 3)), np.zeros((128, 128)))
    for t in (out.pose_code, out.shape_code, out.texture_code):
        assert t.shape == (tiny_net.latent,)
        assert np.all(np.isfinite(t.data))
    assert np.all(out.dims_raw.data > 0)
    assert out.corners_direct.shape == (8, 2)


def test_encoder_is_deterministic(model, rng):
    image, mask = rng.uniform(size=(128, 128, 3)), rng.choice([0.0, 1.0], size=(128, 128))
    a = model.encoder(image, mask)
    b = model.encoder(image, mask)
    np.testing.assert_array_equal(a.shape_code.data, b.shape_code.data)
    np.testing.assert_array_equal(a.pose_code.data, b.pose_code.data)


def test_shortcut_changes_shape_code(tiny_net, rng):
    image, mask = rng.uniform(size=(128, 128, 3)), rng.choice([0.0, 1.0], size=(128, 128))
    with_shortcut = SupNerfModel(tiny_net, RefinerConfig())
    without = SupNerfModel(tiny_net.model_copy(update={"shortcut": False}), RefinerConfig())
    a = with_shortcut.encoder(image, mask, return_features=True)
    b = without.encoder(image, mask)
    assert not np.allclose(a.shape_code.data, b.shape_code.data)
    np.testing.assert_allclose(
        a.features.subtracted.data, a.features.shape_texture.data - a.features.pose.data
    )


def test_encoder_rejects_wrong_size(model):
    with pytest.raises(ShapeError):
        model.encoder(np.zeros((64, 64, 3)), np.zeros((64, 64)))


@pytest.mark.parametrize("n", [1, 7, 32])
def test_decoder_output_ranges(tiny_net, rng, n):
    decoder = NerfDecoder(tiny_net, rng)
    x = Tensor(rng.uniform(-0.5, 0.5, size=(n, 3)))
    shape = Tensor(rng.normal(size=tiny_net.latent))
    texture = Tensor(rng.normal(size=tiny_net.latent))
    sigma, rgb = decoder(x, shape, texture)
    assert sigma.shape == (n,)
    assert rgb.shape == (n, 3)
    assert np.all(sigma.data >= 0)
    assert np.all((rgb.data >= 0) & (rgb.data <= 1))


def test_density_ignores_texture_code(tiny_net, rng):
    decoder = NerfDecoder(tiny_net, rng)
    x = Tensor(rng.uniform(-0.5, 0.5, size=(5, 3)))
    shape = Tensor(rng.normal(size=tiny_net.latent))
    s1, _ = decoder(x, shape, Tensor(rng.normal(size=tiny_net.latent)))
    s2, _ = decoder(x, shape, Tensor(rng.normal(size=tiny_net.latent)))
    np.testing.assert_array_equal(s1.data, s2.data)


def test_mean_density_grad_wrt_shape_code(tiny_net, rng):
    decoder = NerfDecoder(tiny_net, rng)
    x = Tensor(rng.uniform(-0.5, 0.5, size=(16, 3)))
    shape = Parameter(rng.normal(size=tiny_net.latent), name="shape")
    texture = Tensor(rng.normal(size=tiny_net.latent))
    rep = grad_check(lambda: decoder(x, shape, texture)[0].mean(), [shape], tol=1e-5)
    assert rep.passed, rep.max_rel_error


def test_positional_encoding_width(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    assert positional_encoding(x, 3).shape == (4, 3 + 18)
    assert positional_encoding(x, 0).shape == (4, 3)


def test_mlp_spec_validation():
    with pytest.raises(InvalidArgumentError):
        MlpSpec((4,), ())
    with pytest.raises(InvalidArgumentError):
        MlpSpec((4, 2), ("swish",))


def test_parameter_names_are_unique(model):
    names = [name for name, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert all(p.name == name for name, p in model.named_parameters())


def test_same_seed_same_weights(tiny_net):
    a = SupNerfModel(tiny_net, RefinerConfig())
    b = SupNerfModel(tiny_net, RefinerConfig())
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters(), strict=True):
        np.testing.assert_array_equal(pa.data, pb.data)
