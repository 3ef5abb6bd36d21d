import numpy as np
import pytest

from drf.errors import GuidanceError, ShapeError
from drf.model import GUIDANCE_SOURCES, DRFModel, EncoderConfig, ModelConfig, random_guidance
from drf.tensor import Tensor, grad_check
from drf.training import cross_entropy, triplet_loss


def toy_maps(rng, n, t=3, size=16):
    return [rng.uniform(0, 1, (t, 2, size, size)) for _ in range(n)]


def cfg_with(base: ModelConfig, **kw) -> ModelConfig:
    d = base.to_dict()
    d.update(kw)
    return ModelConfig.from_dict(d)


def test_shapes(rng, toy_model_cfg):
    m = DRFModel(toy_model_cfg, seed=1)
    out = m(toy_maps(rng, 3), rng.uniform(0, 1, (3, 24)))
    assert out.f_enc.shape == (3, 4, 2)
    assert out.w_c.shape == (3, 4, 1) and out.w_s.shape == (3, 1, 2)
    assert out.embeddings.shape == (3, 2, 3)
    assert out.logits.shape == (3, 3)
    assert out.activations.shape == (3, 4, 2, 2)


def test_attention_weights_in_open_interval(rng, toy_model_cfg):
    out = DRFModel(toy_model_cfg, seed=2)(toy_maps(rng, 2), rng.uniform(0, 1, (2, 24)))
    for w in (out.w_c.data, out.w_s.data):
        assert np.all(w > 0) and np.all(w < 1)


def test_zero_init_pga_quarter(rng, toy_model_cfg):
    m = DRFModel(cfg_with(toy_model_cfg, pga_init="zeros"), seed=0)
    out = m(toy_maps(rng, 2), rng.uniform(0, 1, (2, 24)))
    assert np.array_equal(out.f_out.data, 0.25 * out.f_enc.data)


def test_pga_matches_double_loop_oracle(rng, toy_model_cfg):
    m = DRFModel(toy_model_cfg, seed=3)
    for p in m.parameters():
        p.data = rng.normal(size=p.shape)
    v = rng.uniform(0, 1, (1, 24))
    f_enc = Tensor(rng.normal(size=(1, 4, 2)))
    _, _, f_out = m.pga(v, f_enc)

    P = {k: p.data for k, p in m.params.items()}
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))
    g = v[0]
    wc = [sig(sum(g[i] * P["pga.channel.weight"][i, c] for i in range(24)) + P["pga.channel.bias"][c]) for c in range(4)]
    k = P["pga.spatial.conv.weight"][0, 0]
    padded = np.concatenate([[0.0], g, [0.0]])
    conv = [k[0] * padded[i] + k[1] * padded[i + 1] + k[2] * padded[i + 2] + P["pga.spatial.conv.bias"][0] for i in range(24)]
    ws = [sig(sum(conv[i] * P["pga.spatial.resize.weight"][i, h] for i in range(24)) + P["pga.spatial.resize.bias"][h]) for h in range(2)]
    for c in range(4):
        for h in range(2):
            expect = f_enc.data[0, c, h] * wc[c] * ws[h]
            assert abs(f_out.data[0, c, h] - expect) < 1e-12
            assert abs(f_out.data[0, c, h]) <= abs(f_enc.data[0, c, h])


def test_pga_rejects_non_pav_model(rng, toy_model_cfg):
    m = DRFModel(cfg_with(toy_model_cfg, guidance="all_ones"))
    with pytest.raises(GuidanceError):
        m.pga(np.zeros(24), Tensor(np.zeros((1, 4, 2))))
    with pytest.raises(GuidanceError):
        DRFModel(toy_model_cfg)(toy_maps(rng, 1), None)
    with pytest.raises(GuidanceError):
        cfg_with(toy_model_cfg, guidance="bogus")


def test_temporal_invariances(rng, toy_model_cfg):
    m = DRFModel(toy_model_cfg, seed=4)
    seq = rng.uniform(0, 1, (5, 2, 16, 16))
    ref = m.encode([seq]).data
    assert np.array_equal(m.encode([seq[rng.permutation(5)]]).data, ref)
    assert np.array_equal(m.encode([np.repeat(seq, 2, axis=0)]).data, ref)
    # variable-length batch agrees with per-sequence encoding
    other = rng.uniform(0, 1, (2, 2, 16, 16))
    both = m.encode([seq, other]).data
    assert np.array_equal(both[0], ref[0]) and np.array_equal(both[1], m.encode([other]).data[0])


def test_zero_input_is_repeatable(toy_model_cfg):
    m = DRFModel(toy_model_cfg, seed=5)
    z = [np.zeros((2, 2, 16, 16))]
    assert np.array_equal(m.encode(z).data, m.encode(z).data)


def test_frame_size_mismatch(rng, toy_model_cfg):
    m = DRFModel(toy_model_cfg)
    with pytest.raises(ShapeError):
        m.encode([rng.uniform(size=(2, 2, 16, 16)), rng.uniform(size=(2, 2, 8, 16))])
    with pytest.raises(ShapeError):
        m.encode([])
    with pytest.raises(ShapeError):
        DRFModel(ModelConfig(encoder=EncoderConfig((2, 2, 2), 2, strips=3))).encode([np.zeros((1, 2, 16, 16))])


def test_guidance_sources(rng, toy_model_cfg):
    f1 = Tensor(rng.normal(size=(1, 4, 2)))
    f2 = Tensor(rng.normal(size=(1, 4, 2)))
    ones = DRFModel(cfg_with(toy_model_cfg, guidance="all_ones"))
    assert np.array_equal(ones.guidance_vector(None, f1).data, np.ones((1, 24)))
    assert np.array_equal(random_guidance(7), random_guidance(7))
    assert random_guidance(7).min() >= 0 and random_guidance(7).max() <= 1
    r = DRFModel(cfg_with(toy_model_cfg, guidance="random", guidance_seed=7))
    assert np.array_equal(r.guidance_vector(None, f1).data[0], random_guidance(7))
    learn = DRFModel(cfg_with(toy_model_cfg, guidance="learnable"))
    assert learn.guidance_vector(None, f1).requires_grad
    differs = 0
    for seed in range(10):
        sa = DRFModel(cfg_with(toy_model_cfg, guidance="self_attention"), seed=seed)
        differs += not np.allclose(sa.guidance_vector(None, f1).data, sa.guidance_vector(None, f2).data)
    assert differs == 10


def test_all_ones_ignores_pav(rng, toy_model_cfg):
    m = DRFModel(cfg_with(toy_model_cfg, guidance="all_ones"), seed=6)
    maps = toy_maps(rng, 2)
    a = m(maps, rng.uniform(0, 1, (2, 24))).logits.data
    b = m(maps, None).logits.data
    assert np.array_equal(a, b)


def test_heads_manual_toy():
    cfg = ModelConfig(encoder=EncoderConfig((2, 2, 2), channels=2, strips=2), embed_dim=2)
    m = DRFModel(cfg)
    m.params["head.strip.weight"].data = np.array([[[1.0, 2.0], [0.0, 1.0]], [[-1.0, 0.0], [3.0, 1.0]]])
    m.params["head.cls.weight"].data = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
    m.params["head.cls.bias"].data = np.array([0.5, 0.0, -0.5])
    f = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))  # (1, C=2, H=2)
    emb, logits = m.heads(f)
    # strip 0: x=(1,3) -> (1*1+3*0, 1*2+3*1) = (1, 5); strip 1: x=(2,4) -> (-2+12, 0+4) = (10, 4)
    assert emb.data[0].tolist() == [[1.0, 5.0], [10.0, 4.0]]
    # mean (5.5, 4.5) -> (5.5+0.5, 4.5, 11-4.5-0.5)
    assert logits.data[0].tolist() == [6.0, 4.5, 6.0]
    _, zero_logits = m.heads(Tensor(np.zeros((1, 2, 2))))
    assert np.array_equal(zero_logits.data[0], m.params["head.cls.bias"].data)


def test_branches_off_equals_no_pga(rng, toy_model_cfg):
    m = DRFModel(cfg_with(toy_model_cfg, channel_branch=False, spatial_branch=False))
    out = m(toy_maps(rng, 2), rng.uniform(0, 1, (2, 24)))
    assert np.array_equal(out.f_out.data, out.f_enc.data)


def test_state_dict_round_trip(toy_model_cfg):
    a = DRFModel(cfg_with(toy_model_cfg, guidance="random"), seed=1)
    b = DRFModel(cfg_with(toy_model_cfg, guidance="random", guidance_seed=9), seed=2)
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        assert np.array_equal(v, b.state_dict()[k])
    with pytest.raises(ValueError):
        b.load_state_dict({})


@pytest.mark.parametrize("source", GUIDANCE_SOURCES)
def test_full_model_gradient_check(rng, toy_model_cfg, source):
    m = DRFModel(cfg_with(toy_model_cfg, guidance=source), seed=11)
    maps = toy_maps(rng, 4, t=2)
    pavs = rng.uniform(0, 1, (4, 24)) if source == "pav" else None
    labels = [0, 0, 1, 2]

    def loss():
        out = m(maps, pavs)
        return cross_entropy(out.logits, labels) + triplet_loss(out.embeddings, labels, 0.2)

    assert grad_check(loss, m.parameters()) < 1e-3


@pytest.mark.parametrize("seed", range(2))
def test_gradients_converge_with_small_eps(seed):
    """Away from kinks the central difference converges to the analytic
    gradient; eps = 1e-6 makes a straddled ReLU/max switch unlikely even with
    several frames and strips."""
    rng = np.random.default_rng(seed)
    maps = toy_maps(rng, 4, t=3)
    pavs = rng.uniform(0, 1, (4, 24))
    labels = [0, 1, 1, 2]
    for source in GUIDANCE_SOURCES:
        cfg = ModelConfig(encoder=EncoderConfig((2, 3, 3), 4, 2), embed_dim=3, guidance=source)
        m = DRFModel(cfg, seed=seed)
        for name, p in m.params.items():
            if name.endswith(".bias"):
                p.data = rng.normal(0.0, 0.1, p.shape)

        def loss():
            out = m(maps, pavs if source == "pav" else None)
            return cross_entropy(out.logits, labels) + triplet_loss(out.embeddings, labels, 0.2)

        assert grad_check(loss, m.parameters(), eps=1e-6) < 1e-6, source
