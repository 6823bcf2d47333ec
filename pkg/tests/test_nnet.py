import numpy as np
import pytest

from gppvae import tensor as T
from gppvae.nnet import Decoder, Encoder, from_descriptor, reparameterize


def relu_margin(fn):
    """Smallest |pre-activation| seen by any relu while running ``fn``."""
    seen = []
    orig = T.relu

    def spy(a):
        seen.append(np.abs(a.data).min())
        return orig(a)

    T.relu = spy
    try:
        fn()
    finally:
        T.relu = orig
    return min(seen) if seen else np.inf


def net_loss(enc, dec, y, eps, w, cond=None):
    mu, lv = enc(y, cond)
    z = reparameterize(mu, lv, eps)
    return T.tsum(T.mul(dec(z, cond), T.Tensor(w)))


def safe_inputs(enc, dec, shape, latent, cond_dim=0, margin=1e-3):
    # central differences are only meaningful away from relu kinks
    for seed in range(100):
        r = np.random.default_rng(seed)
        y, eps = r.uniform(size=shape), r.normal(size=(shape[0], latent))
        w = r.normal(size=shape)
        cond = r.normal(size=(shape[0], cond_dim)) if cond_dim else None
        if relu_margin(lambda: net_loss(enc, dec, y, eps, w, cond)) > margin:
            return y, eps, w, cond
    raise RuntimeError("no kink-free input found")


@pytest.mark.parametrize("arch,size,cond_dim,batch", [("conv", 8, 0, 2), ("conv", 7, 2, 2), ("mlp", 5, 0, 1)])
def test_networks_pass_grad_check(arch, size, cond_dim, batch):
    enc = Encoder(arch, 1, size, 2, cond_dim=cond_dim, seed=1)
    dec = Decoder(arch, 1, size, 2, cond_dim=cond_dim, seed=2)
    y, eps, w, cond = safe_inputs(enc, dec, (batch, 1, size, size), 2, cond_dim)
    params = list(enc.params.values()) + list(dec.params.values())
    assert T.grad_check(lambda: net_loss(enc, dec, y, eps, w, cond), params) <= 1e-4


def test_reference_shapes():
    enc, dec = Encoder("conv", 1, 28, 16, seed=0), Decoder("conv", 1, 28, 16, seed=0)
    y = np.random.default_rng(0).uniform(size=(5, 1, 28, 28))
    mu, lv = enc(y)
    assert mu.shape == (5, 16) and lv.shape == (5, 16)
    assert dec(mu).shape == (5, 1, 28, 28)
    assert enc.params["fc.w"].shape == (16 * 7 * 7, 32)
    assert dec.params["fc.w"].shape == (16, 16 * 7 * 7)


def test_zero_initialised_nets():
    enc = Encoder("conv", 1, 12, 3, init="zeros")
    enc.params["fc.b"].data[:] = np.arange(6.0)
    mu, lv = enc(np.zeros((2, 1, 12, 12)))
    np.testing.assert_array_equal(mu.data, [[0, 1, 2]] * 2)
    np.testing.assert_array_equal(lv.data, [[3, 4, 5]] * 2)
    dec = Decoder("conv", 1, 12, 3, init="zeros")
    dec.params["deconv2.b"].data[:] = 0.7
    out = dec(np.full((2, 3), 0.4)).data
    np.testing.assert_allclose(out, 1 / (1 + np.exp(-0.7)), rtol=1e-15)


def test_decoder_output_in_unit_interval(rng):
    dec = Decoder("conv", 1, 28, 4, seed=3)
    out = dec(rng.normal(scale=20, size=(3, 4))).data
    assert out.min() >= 0 and out.max() <= 1


def test_log_variance_head_is_unbounded(rng):
    enc = Encoder("mlp", 1, 6, 2, seed=0)
    enc.params["fc2.b"].data[2:] = -500.0
    _, lv = enc(rng.uniform(size=(2, 1, 6, 6)))
    assert np.all(np.isfinite(lv.data)) and lv.data.max() < -100


def test_shape_errors():
    enc, dec = Encoder("conv", 1, 28, 16), Decoder("conv", 1, 28, 16)
    with pytest.raises(ValueError):
        enc(np.zeros((2, 1, 27, 27)))
    with pytest.raises(ValueError):
        dec(np.zeros((2, 15)))
    with pytest.raises(ValueError):
        Encoder("conv", 1, 28, 16, cond_dim=2)(np.zeros((2, 1, 28, 28)))
    with pytest.raises(ValueError):
        Encoder("resnet", 1, 28, 16)


def test_float32_networks(rng):
    enc = Encoder("conv", 1, 28, 16, dtype=np.float32, seed=0)
    mu, _ = enc(rng.uniform(size=(2, 1, 28, 28)).astype(np.float32))
    assert mu.dtype == np.float32


def test_descriptor_round_trip():
    enc = Encoder("conv", 1, 28, 16, cond_dim=2, seed=4)
    again = from_descriptor(Encoder, enc.descriptor(), seed=4)
    for k, p in enc.params.items():
        np.testing.assert_array_equal(again.params[k].data, p.data)


# reparameterisation ----------------------------------------------------------


def test_reparameterize_examples(rng):
    mu = T.Tensor(rng.normal(size=(3, 2)))
    lv = T.Tensor(rng.normal(size=(3, 2)))
    eps = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(reparameterize(mu, lv, np.zeros((3, 2))).data, mu.data)
    z = reparameterize(mu, T.Tensor(np.full((3, 2), -50.0)), eps).data
    np.testing.assert_allclose(z, mu.data, atol=1e-10)
    np.testing.assert_array_equal(reparameterize(T.Tensor(np.zeros((3, 2))), T.Tensor(np.zeros((3, 2))), eps).data,
                                  eps)


def test_reparameterize_gradients_skip_eps(rng):
    mu = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    lv = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    eps = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    T.tsum(reparameterize(mu, lv, eps)).backward()
    assert eps.grad is None
    np.testing.assert_allclose(mu.grad, 1.0)
    np.testing.assert_allclose(lv.grad, 0.5 * eps.data * np.exp(0.5 * lv.data))


def test_reparameterize_statistics():
    r = np.random.default_rng(0)
    mu, lv = np.array([[0.3, -1.2]]), np.array([[0.4, -0.7]])
    eps = r.standard_normal((100_000, 2))
    z = reparameterize(T.Tensor(np.repeat(mu, 100_000, 0)), T.Tensor(np.repeat(lv, 100_000, 0)), eps).data
    assert np.all(np.abs(z.mean(0) - mu[0]) < 0.02)
    assert np.all(np.abs(z.var(0) / np.exp(lv[0]) - 1) < 0.03)


def test_reparameterize_shape_mismatch():
    with pytest.raises(ValueError):
        reparameterize(T.Tensor(np.zeros((2, 2))), T.Tensor(np.zeros((2, 2))), np.zeros((2, 3)))
