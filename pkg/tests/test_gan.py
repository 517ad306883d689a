import numpy as np
import pytest

from gossipgan.autodiff import NonFiniteError, Tensor, grad, ops
from gossipgan.gan import (
    Discriminator, GanConfig, Generator, build_gan, consistency_term, discriminator_loss, generator_loss,
    gradient_penalty, graph_size, interpolate_hat, sample_fake, train_gan,
)
from gossipgan.nn import ParamVector, memory_bytes, param_count

from op_cases import nested_penalty_check
from oracles import central_diff, rel_error

TINY = GanConfig(latent_dim=4, width_scale=1 / 16, size=(8, 8), batch_size=4, epochs=2, n_critic=2)


def _conv(cin, cout, k):
    return cin * cout * k * k + cout


def test_full_scale_counts_match_layer_arithmetic():
    c = 64
    up_block = 2 * _conv(c, c, 3) + 2 * 2 * c
    gen = _conv(128, c, 4) + 3 * up_block + 2 * c + _conv(c, 2, 3)
    first = _conv(2, c, 3) + _conv(c, c, 3) + 2 * 2 * c + _conv(2, c, 1)
    disc = first + 3 * (2 * _conv(c, c, 3) + 2 * 2 * c) + (c + 1)
    G, D = build_gan(GanConfig(), 0)
    assert G.param_count() == gen == 354_754
    assert D.param_count() == disc == 260_993


def test_generator_output_shape_and_range():
    G = Generator(GanConfig(), np.random.default_rng(0))
    out = G(np.random.default_rng(1).standard_normal((2, 128, 1, 1)))
    assert out.shape == (2, 2, 32, 32)
    assert np.all(np.abs(out.data) < 1)


def test_generator_latent_shape_checked():
    G = Generator(TINY, np.random.default_rng(0))
    with pytest.raises(ValueError):
        G(np.zeros((2, 5, 1, 1)))


def test_discriminator_features_and_determinism():
    D = Discriminator(GanConfig(), np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(-1, 1, size=(2, 2, 32, 32))
    s1, f1 = D(x, 0.0)
    s2, _ = D(x, 0.0)
    assert f1.shape == (2, 64)
    np.testing.assert_array_equal(s1.data, s2.data)
    with pytest.raises(ValueError):
        D(np.zeros((2, 2, 16, 16)))


def _constant_critic(c):
    _, D = build_gan(TINY, 0)
    D.fc.weight.data = np.zeros_like(D.fc.weight.data)
    D.fc.bias.data = np.full_like(D.fc.bias.data, c)
    return D


@pytest.mark.parametrize("c", [0.0, 1.7, -0.4])
def test_generator_loss_with_constant_critic(c):
    G, _ = build_gan(TINY, 0)
    z = np.random.default_rng(0).standard_normal((3, 4, 1, 1))
    assert float(generator_loss(_constant_critic(c), G, z).data) == pytest.approx(-c, abs=1e-15)


def test_generator_loss_gradient_against_finite_differences():
    cfg = GanConfig(latent_dim=3, width_scale=1 / 32, size=(4, 4))
    G, D = build_gan(cfg, 2)
    z = np.random.default_rng(3).standard_normal((4, 3, 1, 1))
    params = G.parameters()
    grads = grad(generator_loss(D, G, z, 0.3, 7), params)
    for p, g in list(zip(params, grads))[:4]:
        base = p.data.copy()

        def f(v, p=p):
            p.data = v
            return float(generator_loss(D, G, z, 0.3, 7).data)

        fd = central_diff(f, base)
        p.data = base
        assert rel_error(g.data, fd) < 1e-4


def test_interpolation_endpoints_convexity_and_seed():
    rng = np.random.default_rng(0)
    H, F = rng.normal(size=(5, 2, 3, 3)), rng.normal(size=(5, 2, 3, 3))
    np.testing.assert_array_equal(interpolate_hat(H, F, weights=np.ones(5)), H)
    np.testing.assert_array_equal(interpolate_hat(H, F, weights=np.zeros(5)), F)
    hat = interpolate_hat(H, F, np.random.default_rng(4))
    assert np.all(hat >= np.minimum(H, F) - 1e-15) and np.all(hat <= np.maximum(H, F) + 1e-15)
    np.testing.assert_array_equal(hat, interpolate_hat(H, F, np.random.default_rng(4)))
    with pytest.raises(ValueError):
        interpolate_hat(H, F[:2], rng)


def _linear_critic(w):
    w = Tensor(np.asarray(w, dtype=float))
    return lambda x: ops.matmul(ops.reshape(x, (x.shape[0], -1)), ops.reshape(w, (-1, 1)))


@pytest.mark.parametrize("norm,expected", [(1.0, 0.0), (3.0, 4.0)])
def test_penalty_for_linear_critic(norm, expected):
    rng = np.random.default_rng(0)
    w = rng.normal(size=8)
    w *= norm / np.linalg.norm(w)
    pts = rng.normal(size=(5, 2, 2, 2))
    assert abs(float(gradient_penalty(_linear_critic(w), pts).data) - expected) < 1e-10


@pytest.mark.filterwarnings("ignore:overflow")
def test_penalty_non_finite_gradient():
    def critic(x):
        return ops.mul(ops.sum(x, axis=(1, 2, 3)), 1e308)

    with pytest.raises(NonFiniteError):
        gradient_penalty(critic, np.ones((2, 2, 2, 2)) * 10)


def test_penalty_parameter_gradient_nested_finite_differences():
    worst, bias_grad, n = nested_penalty_check(gradient_penalty)
    assert n <= 100
    assert worst < 1e-3
    np.testing.assert_array_equal(bias_grad, 0.0)


def test_consistency_zero_without_dropout_or_with_huge_margin():
    _, D = build_gan(TINY, 0)
    H = np.random.default_rng(0).uniform(-1, 1, size=(4, 2, 8, 8))
    for variant in ("adopted", "full"):
        assert float(consistency_term(D, H, 0.0, (1, 2), variant).data) == 0.0
        assert float(consistency_term(D, H, 0.5, (1, 2), variant, margin=1e9).data) == 0.0


def test_consistency_variants_differ_by_feature_term():
    _, D = build_gan(TINY, 0)
    H = np.random.default_rng(0).uniform(-1, 1, size=(6, 2, 8, 8))
    (d1, f1), (d2, f2) = D(H, 0.5, 11), D(H, 0.5, 12)
    score = np.abs(d1.data - d2.data)
    feat = 0.1 * np.linalg.norm(f1.data - f2.data, axis=1)
    margin = 0.05
    adopted = np.mean(np.maximum(0, score - margin))
    full = np.mean(np.maximum(0, score + feat - margin))
    assert float(consistency_term(D, H, 0.5, (11, 12), "adopted", margin).data) == pytest.approx(adopted, abs=1e-12)
    assert float(consistency_term(D, H, 0.5, (11, 12), "full", margin).data) == pytest.approx(full, abs=1e-12)
    assert full > adopted


def test_critic_loss_reduces_to_critic_difference():
    cfg = GanConfig(latent_dim=4, width_scale=1 / 16, size=(8, 8), lambda1=0, lambda2=0, dropout=0.3)
    G, D = build_gan(cfg, 0)
    rng = np.random.default_rng(1)
    H = rng.uniform(-1, 1, size=(5, 2, 8, 8))
    fake = rng.uniform(-1, 1, size=(5, 2, 8, 8))
    seeds = [3, 4, 5, 6]
    terms = discriminator_loss(D, Tensor(fake), H, None, cfg, seeds=seeds)
    expected = np.mean(D(fake, 0.3, 3)[0].data) - np.mean(D(H, 0.3, 4)[0].data)
    assert abs(float(terms.loss.data) - expected) < 1e-12


def test_critic_loss_zero_when_generator_reproduces_data():
    cfg = GanConfig(latent_dim=4, width_scale=1 / 16, size=(8, 8), lambda1=0, lambda2=0, dropout=0.0)
    _, D = build_gan(cfg, 0)
    H = np.random.default_rng(1).uniform(-1, 1, size=(5, 2, 8, 8))
    assert float(discriminator_loss(D, Tensor(H.copy()), H, None, cfg).loss.data) == 0.0


def test_adopted_graph_smaller_than_full():
    G, D = build_gan(TINY, 0)
    H = np.random.default_rng(0).uniform(-1, 1, size=(4, 2, 8, 8))
    z = np.random.default_rng(1).standard_normal((4, 4, 1, 1))
    assert graph_size(D, G, H, z, TINY, "adopted") < graph_size(D, G, H, z, TINY, "full")


def test_training_history_and_determinism():
    data = np.random.default_rng(0).uniform(-0.5, 0.5, size=(8, 2, 8, 8))
    G1, D1, h1 = train_gan(*build_gan(TINY, 0), data, TINY, 5)
    G2, D2, h2 = train_gan(*build_gan(TINY, 0), data, TINY, 5)
    assert len(h1.d_loss) == len(h1.g_loss) == TINY.epochs
    assert h1.d_loss == h2.d_loss
    assert G1.state().flat(True).tobytes() == G2.state().flat(True).tobytes()
    assert D1.state().flat(True).tobytes() == D2.state().flat(True).tobytes()


def test_toy_distribution_critic_gap_shrinks():
    rng = np.random.default_rng(0)
    data = np.zeros((64, 2, 32, 32))
    pts = rng.normal([0.5, -0.3], 0.05, size=(64, 2))
    data[:, 0, 0, 0], data[:, 0, 0, 1] = pts[:, 0], pts[:, 1]
    cfg = GanConfig(size=(32, 32), width_scale=0.0625, latent_dim=8, batch_size=32, epochs=40, n_critic=5, lr=2e-3)
    _, _, hist = train_gan(*build_gan(cfg, 0), data, cfg, 1)
    assert abs(hist.critic_gap[-1]) <= 0.5 * abs(hist.critic_gap[0])


def test_sample_fake_range_and_seed():
    G, _ = build_gan(TINY, 0)
    a = sample_fake(G, 7, 3, chunk=3)
    assert a.shape == (7, 2, 8, 8) and np.all(np.abs(a) < 1)
    np.testing.assert_array_equal(a, sample_fake(G, 7, 3))


def test_parameter_memory_arithmetic():
    assert param_count(ParamVector({})) == 0 and memory_bytes(ParamVector({})) == 0
    pv = ParamVector({"a": np.zeros((3, 4)), "b": np.zeros(5)})
    assert param_count(pv) == 17 and memory_bytes(pv) == 68
    assert 5000 * 2 * 32 * 32 * 4 == 40_960_000
    assert round(40_960_000 / 2 ** 20, 2) == 39.06


def test_config_validation():
    for bad in ({"lambda1": -1}, {"dropout": 1.0}, {"margin": -0.1}, {"variant": "other"}, {"n_critic": 0}):
        with pytest.raises(ValueError):
            GanConfig(**bad)
