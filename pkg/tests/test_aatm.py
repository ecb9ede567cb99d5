import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from meddet_kit import numcore as nc
from meddet_kit.aatm import (AdversarialBatch, Discriminator, Generator, d_loss, discriminate, g_loss,
                             generate)
from meddet_kit.numcore import ContractError, DimensionError, Tensor


def half_discriminator(dim, rng):
    d = Discriminator.init(dim, rng, hidden=(5, 3))
    w, b = d.layers[-1]
    w.data[...] = 0.0
    b.data[...] = 0.0
    return d


def mlp_oracle(d, x):
    h = x.reshape(x.shape[0], -1)
    for j, (w, b) in enumerate(d.layers):
        h = h @ w.data + b.data
        if j < len(d.layers) - 1:
            h = np.maximum(h, 0)
    return 1 / (1 + np.exp(-h[:, 0]))


def conv3_oracle(x, w, b):
    n, c, hh, ww = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], hh, ww))
    for u in range(3):
        for v in range(3):
            out += np.einsum("oc,nchw->nohw", w[:, :, u, v], xp[:, :, u:u + hh, v:v + ww])
    return out + b[None, :, None, None]


def test_d_loss_at_half_is_two_ln2_per_level(f64, rng):
    ds = [half_discriminator(8, rng) for _ in range(3)]
    batches = [AdversarialBatch(k, Tensor(rng.normal(size=(4, 2, 2, 2))), Tensor(rng.normal(size=(4, 2, 2, 2))))
               for k in range(3)]
    assert abs(d_loss(batches, ds).item() - 3 * 2 * math.log(2)) <= 1e-9
    assert abs(d_loss(batches[:1], ds).item() - 2 * math.log(2)) <= 1e-9
    assert abs(g_loss(batches[:1], ds).item() - math.log(2)) <= 1e-9
    assert abs(g_loss(batches[:1], ds, "literal").item() + math.log(2)) <= 1e-9


def test_discriminator_matches_numpy_mlp(f64, rng):
    d = Discriminator.init(12, rng, hidden=(6, 4))
    x = rng.normal(size=(5, 3, 2, 2))
    np.testing.assert_allclose(discriminate(d, Tensor(x)).data, mlp_oracle(d, x), atol=1e-12)


def test_generator_matches_conv_oracle(f64, rng):
    g = Generator.init(3, rng)
    x = rng.normal(size=(2, 3, 4, 4))
    h = np.maximum(conv3_oracle(x, g.w1.data, g.b1.data), 0)
    np.testing.assert_allclose(generate(g, Tensor(x)).data, conv3_oracle(h, g.w2.data, g.b2.data), atol=1e-12)


def test_generator_identity_and_zeros(f64, rng):
    x = rng.uniform(0, 1, size=(1, 2, 3, 3))
    assert np.array_equal(generate(Generator.identity(2), Tensor(x)).data, x)
    assert np.all(generate(Generator.zeros(2), Tensor(x)).data == 0)


def test_shape_errors(rng):
    with pytest.raises(DimensionError):
        generate(Generator.zeros(2), Tensor(np.zeros((1, 3, 2, 2))))
    with pytest.raises(DimensionError, match="input_dim"):
        discriminate(Discriminator.init(7, rng), Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ContractError):
        AdversarialBatch(0, Tensor(np.zeros((0, 1))), Tensor(np.zeros((1, 1))))
    with pytest.raises(ContractError):
        d_loss([], [])


def _isolation_setup(rng):
    student = Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)
    g = Generator.init(2, rng)
    d = Discriminator.init(8, rng, hidden=(5, 3))
    teacher = Tensor(rng.normal(size=(3, 2, 2, 2)))
    batch = AdversarialBatch(0, teacher, generate(g, student))
    return student, g, d, batch


def test_d_loss_reaches_only_discriminator(f64, rng):
    student, g, d, batch = _isolation_setup(rng)
    d_loss([batch], [d]).backward()
    for p in [student, *g.parameters()]:
        assert p.grad is None or np.all(p.grad == 0)
    assert any(p.grad is not None and np.any(p.grad != 0) for p in d.parameters())


def test_g_loss_reaches_only_generator_side(f64, rng):
    student, g, d, batch = _isolation_setup(rng)
    g_loss([batch], [d]).backward()
    for p in d.parameters():
        assert p.grad is None or np.all(p.grad == 0)
    assert student.grad is not None and np.any(student.grad != 0)


def test_probabilities_clamped_at_saturation(f64):
    d = Discriminator([(Tensor(np.full((1, 1), 1.0), requires_grad=True), Tensor([0.0], requires_grad=True))])
    big = Tensor(np.full((2, 1, 1, 1), 1e3))
    b = AdversarialBatch(0, big, big)
    loss = d_loss([b], [d]).item()
    assert np.isfinite(loss) and abs(loss + math.log(1e-7)) < 1e-6


@given(seed=st.integers(0, 2**16))
def test_discriminator_step_reduces_loss(seed):
    with nc.precision(64):
        r = np.random.default_rng(seed)
        d = Discriminator.init(4, r, hidden=(6, 4))
        pos = Tensor(r.normal(1.0, 0.3, size=(8, 1, 2, 2)))
        neg = Tensor(r.normal(-1.0, 0.3, size=(8, 1, 2, 2)))
        b = [AdversarialBatch(0, pos, neg)]
        before = d_loss(b, [d])
        before.backward()
        for p in d.parameters():
            if p.grad is not None:
                p.data = p.data - 1e-3 * p.grad
        assert d_loss(b, [d]).item() <= before.item() + 1e-12


def test_unknown_g_form(rng):
    _, _, d, batch = _isolation_setup(rng)
    with pytest.raises(ContractError):
        g_loss([batch], [d], "wgan")
