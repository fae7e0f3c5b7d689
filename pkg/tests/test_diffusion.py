import numpy as np
import pytest
import torch

from helpers import make_corpus, small_config
from vihoi import diffusion as D
from vihoi import generator as G
from vihoi.errors import BadT, ShapeMismatch
from vihoi.motion import MODEL_DIM

ADAPTER = {"k_visual": 1, "k_text": 1, "heads": 2, "ffn": False, "variant": "qformer"}


def small_denoiser(**kw):
    cfg = D.DenoiserConfig(**{"d_model": 32, "layers": 2, "heads": 2, "geometry_input_dim": 16,
                              "geometry_embed_dim": 16, **kw})
    return D.Denoiser(cfg, seed=0)


def test_cosine_schedule():
    s = D.make_schedule("cosine", 1000)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[0] > 0.999 and s.alpha_bar[-1] < 1e-4
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(s.alpha), atol=1e-12)


def test_linear_schedule():
    s = D.make_schedule("linear", 1000)
    assert s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(0.02)
    assert s.alpha_bar[-1] < 1e-3


@pytest.mark.parametrize("T", [1, 0, 2.5])
def test_bad_T(T):
    with pytest.raises(BadT):
        D.make_schedule("cosine", T)


def test_q_sample_limits():
    s = D.make_schedule("cosine", 1000)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (8, MODEL_DIM))
    eps = rng.standard_normal(x0.shape)
    assert np.abs(D.q_sample(x0, 0, eps, s) - x0).max() < 0.15
    with pytest.raises(BadT):
        D.q_sample(x0, 1000, eps, s)


def test_closed_form_matches_chain():
    s = D.make_schedule("cosine", 1000)
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-1, 1, (8, MODEL_DIM))
    for t in (0, 1, 57, 400, 999):
        eps = rng.standard_normal((t + 1, 8, MODEL_DIM))
        x = x0
        for i in range(t + 1):
            x = D.q_step(x, i, eps[i], s)
        # the chain's accumulated noise is Gaussian with the closed-form variance; recover it
        # by tracking the coefficients of each eps draw
        coef = np.array([np.sqrt(1 - s.alpha[i]) * np.prod(np.sqrt(s.alpha[i + 1:t + 1])) for i in range(t + 1)])
        eps_eq = np.tensordot(coef, eps, axes=1) / np.sqrt(1 - s.alpha_bar[t])
        assert np.abs(D.q_sample(x0, t, eps_eq, s) - x).max() < 1e-5
        np.testing.assert_allclose((coef ** 2).sum(), 1 - s.alpha_bar[t], rtol=1e-9)


def test_sampling_timesteps():
    ts = D.sampling_timesteps(1000, 100)
    assert ts[0] == 0 and ts[-1] == 999 and len(ts) == 100 and np.all(np.diff(ts) > 0)
    assert list(D.sampling_timesteps(1000, 1)) == [999]
    assert len(D.sampling_timesteps(10, 100)) == 10


def test_sampler_fixed_point_and_determinism():
    s = D.make_schedule("cosine", 1000)
    target = np.random.default_rng(0).uniform(-1, 1, (6, MODEL_DIM))
    calls = []

    def stub(x, t):
        calls.append(t)
        return np.broadcast_to(target, x.shape)

    out = D.ddpm_sample_loop(stub, (2, 6, MODEL_DIM), s, 100, seed=[3, 4])
    assert np.abs(out - target).max() < 1e-3
    assert calls[0] == 999 and calls[-1] == 0 and len(calls) == 100
    # a real network: same seeds give the same sample, and rows do not depend on batch company
    net = np.random.default_rng(5).normal(size=(MODEL_DIM, MODEL_DIM)) * 0.05
    f = lambda x, t: np.tanh(x @ net)  # noqa: E731
    a = D.ddpm_sample_loop(f, (2, 6, MODEL_DIM), s, 20, seed=[3, 4])
    b = D.ddpm_sample_loop(f, (2, 6, MODEL_DIM), s, 20, seed=[3, 4])
    c = D.ddpm_sample_loop(f, (1, 6, MODEL_DIM), s, 20, seed=[4])
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[1], c[0])


def test_single_step_sampler_is_one_forward_call():
    s = D.make_schedule("cosine", 1000)
    seen = []

    def f(x, t):
        seen.append((x.copy(), t))
        return 2 * x

    out = D.ddpm_sample_loop(f, (1, 4, MODEL_DIM), s, 1, seed=0)
    assert len(seen) == 1 and seen[0][1] == 999
    np.testing.assert_array_equal(out, 2 * seen[0][0])


def test_denoiser_shapes_and_conditioning():
    net = small_denoiser()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 10, MODEL_DIM, generator=g)
    t = torch.tensor([5, 900])
    c_v, c_t = torch.randn(2, 1, 32, generator=g), torch.randn(2, 1, 32, generator=g)
    geom = torch.randn(2, 16, generator=g)
    out = net(x, t, c_v, c_t, geom)
    assert out.shape == x.shape
    zero = net(x, t, torch.zeros_like(c_v), torch.zeros_like(c_t), geom)
    assert (out - zero).abs().max() > 0
    with pytest.raises(ShapeMismatch):
        net(x[..., :10], t, c_v, c_t, geom)
    with pytest.raises(ShapeMismatch):
        net(x, t, c_v[:1], c_t, geom)


@pytest.mark.parametrize("fusion", ["add", "concat"])
def test_padding_mask(fusion):
    net = small_denoiser(geometry_fusion=fusion)
    g = torch.Generator().manual_seed(1)
    x = torch.randn(1, 12, MODEL_DIM, generator=g)
    c_v, c_t, geom = torch.randn(1, 2, 32, generator=g), torch.randn(1, 1, 32, generator=g), torch.randn(1, 16, generator=g)
    t = torch.tensor([300])
    ref = net(x, t, c_v, c_t, geom)
    padded = torch.cat([x, torch.randn(1, 12, MODEL_DIM, generator=g)], dim=1)
    mask = torch.zeros(1, 24, dtype=torch.bool)
    mask[:, :12] = True
    out = net(padded, t, c_v, c_t, geom, mask)
    assert (out[:, :12] - ref).abs().max() < 1e-5


def test_keypoint_geometry_path():
    net = small_denoiser(geometry="keypoint24", geometry_input_dim=72)
    assert isinstance(net.geom_enc, torch.nn.Linear)
    with pytest.raises(ValueError):
        small_denoiser(geometry="voxels")


class Item:
    def __init__(self, x0, e_v, e_t, geom_in):
        self.x0, self.e_v, self.e_t, self.geom_in = x0, e_v, e_t, geom_in


def tiny_model(dtype=torch.float32, d_enc=8):
    dcfg = D.DenoiserConfig(d_model=16, layers=1, heads=2, geometry_input_dim=12, geometry_embed_dim=16)
    return G.GeneratorModel(dcfg, d_enc, ADAPTER, seed=0).to(dtype)


def tiny_batch(rng, n=2, L=6, d_enc=8):
    return [Item(rng.uniform(-1.7, 1.7, (L, MODEL_DIM)), rng.normal(size=(5, d_enc)),
                 rng.normal(size=(3 + i, d_enc)), rng.normal(size=12)) for i in range(n)]


class FixedT:
    """rng stand-in pinning t while drawing noise from a real generator."""

    def __init__(self, t, seed=0):
        self.t, self.g = t, np.random.default_rng(seed)

    def integers(self, lo, hi, size):
        return np.full(size, self.t)

    def standard_normal(self, shape):
        return self.g.standard_normal(shape)

    def random(self, n):
        return self.g.random(n)


def test_loss_is_zero_for_perfect_predictor():
    model = tiny_model()
    batch = tiny_batch(np.random.default_rng(0))
    model.denoiser.forward = lambda x_t, t, c_v, c_t, g, mask=None: torch.as_tensor(
        np.stack([b.x0 for b in batch]), dtype=x_t.dtype)
    assert G.training_loss(batch, model, D.make_schedule(), np.random.default_rng(0)).item() == 0.0


def test_loss_near_T_matches_variance_bound():
    model = tiny_model()
    batch = tiny_batch(np.random.default_rng(1), n=8, L=16)
    ex2 = np.mean([np.mean(b.x0 ** 2) for b in batch])   # uniform(-1.7, 1.7): E x^2 ~ 0.96
    loss = G.training_loss(batch, model, D.make_schedule(), FixedT(999)).item()
    assert 0.5 * ex2 <= loss <= 2.0 * ex2


def test_training_loss_query_gradient_finite_difference():
    model = tiny_model(torch.float64)
    batch = tiny_batch(np.random.default_rng(2))
    sched = D.make_schedule()
    q = model.adapter_text.queries

    def loss():
        return G.training_loss(batch, model, sched, np.random.default_rng(7))

    model.zero_grad()
    loss().backward()
    analytic = q.grad.clone()
    num = torch.zeros_like(q)
    eps = 1e-6
    with torch.no_grad():
        for i in range(q.numel()):
            orig = q.view(-1)[i].item()
            q.view(-1)[i] = orig + eps
            up = loss().item()
            q.view(-1)[i] = orig - eps
            down = loss().item()
            q.view(-1)[i] = orig
            num.view(-1)[i] = (up - down) / (2 * eps)
    assert ((analytic - num).norm() / num.norm()).item() < 1e-3


def test_cond_dropout_zeroes_priors():
    model = tiny_model()
    batch = tiny_batch(np.random.default_rng(3))
    seen = {}
    orig = model.denoiser.forward

    def spy(x_t, t, c_v, c_t, g, mask=None):
        seen["c"] = (c_v.detach().clone(), c_t.detach().clone())
        return orig(x_t, t, c_v, c_t, g, mask)

    model.denoiser.forward = spy
    G.training_loss(batch, model, D.make_schedule(), np.random.default_rng(0), cond_dropout=1.0)
    assert not seen["c"][0].any() and not seen["c"][1].any()


def test_masked_mse():
    p, y = torch.zeros(1, 4, 2), torch.ones(1, 4, 2)
    y[0, 2:] = 10
    m = torch.tensor([[True, True, False, False]])
    assert D.masked_mse(p, y, m).item() == pytest.approx(1.0)


@pytest.fixture(scope="module")
def corpus8(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("c8") / "data", 8, seed=3)


def test_resume_matches_uninterrupted(corpus8, tmp_path):
    cfg = small_config(tmp_path)
    cfg["train"].update(batch=4, checkpoint_every=0)
    ids = [f"seq_{i:04d}" for i in range(8)]
    ex = G.build_extractor(cfg)
    checksum = ex.checksum()
    full = G.train(corpus8, cfg, 0, tmp_path / "full.zip", ids=ids, extractor=ex, steps=4)
    G.train(corpus8, cfg, 0, tmp_path / "half.zip", ids=ids, extractor=ex, steps=2)
    resumed = G.train(corpus8, cfg, 0, tmp_path / "resumed.zip", extractor=ex, steps=4,
                      resume=tmp_path / "half.zip")
    assert len(resumed.losses) == 4
    np.testing.assert_allclose(resumed.losses, full.losses, rtol=0, atol=1e-6)
    a, b = G.read_checkpoint(full.checkpoint)[1], G.read_checkpoint(resumed.checkpoint)[1]
    for k in a:
        if not k.startswith("optim."):
            np.testing.assert_allclose(a[k], b[k], atol=1e-6)
    assert ex.checksum() == checksum == full.extractor_checksum


def test_generator_sample_deterministic(corpus8, tmp_path):
    cfg = small_config(tmp_path)
    ids = [f"seq_{i:04d}" for i in range(8)]
    ex = G.build_extractor(cfg)
    res = G.train(corpus8, cfg, 1, tmp_path / "ck.zip", ids=ids, extractor=ex, steps=2)
    gen = G.load_generator(res.checkpoint)
    items, _ = G.prepare_items(corpus8, ids[:2], ex, gen.featurizer, gen.normalizer)
    args = ([i.e_v for i in items], [i.e_t for i in items], [i.geom_in for i in items], 20, [5, 6])
    a = gen.sample(*args)
    b = gen.sample(*args)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.to_model_vector(), y.to_model_vector())
        x.validate_rotations()
    assert a[0].length == 20
