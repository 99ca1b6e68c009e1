import numpy as np
import pytest
import torch

from regnet.model import (
    ConfigError, IncompatibleCheckpoint, ModelConfig, PatchDiscriminator, RegNet, build,
    load_params, parse_variant, save_params,
)
from regnet.training import TrainConfig, gradient_check

SMALL = ModelConfig(T=8, F=6, T_audio=32, n_mels=10, enc_channels=8, enc_lstm_hidden=4,
                    reg_dim=3, reg_downsample=32, gen_channels=8, postnet_channels=8, disc_channels=4)
TINY = ModelConfig(T=4, F=3, T_audio=16, n_mels=5, enc_channels=4, enc_lstm_hidden=3, enc_lstm_layers=1,
                   reg_dim=2, reg_downsample=8, reg_layers=1, gen_channels=4, postnet_channels=4,
                   postnet_kernel=3, disc_channels=4)


def _inputs(cfg, batch=3, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    v = torch.rand(batch, cfg.T, cfg.F, generator=g, dtype=dtype)
    s = -6 + 3 * torch.randn(batch, cfg.n_mels, cfg.T_audio, generator=g, dtype=dtype)
    return v, s


@pytest.fixture
def small():
    net, disc = build(SMALL, seed=0)
    return net.eval(), disc.eval()


def test_shapes(small):
    net, disc = small
    v, s = _inputs(SMALL)
    vf = net.encode_visual(v)
    assert vf.shape == (3, SMALL.T, SMALL.visual_dim)
    r = net.regularize_audio(s)
    assert r.shape == (3, SMALL.reg_width, SMALL.T)
    initial, final = net(v, s)
    assert initial.shape == final.shape == (3, SMALL.n_mels, SMALL.T_audio)
    assert disc(v, final).shape == (3, SMALL.T_audio // 4)


def test_default_desk_shapes():
    net, disc = build(ModelConfig())
    net.eval()
    v, s = _inputs(ModelConfig(), batch=2)
    assert net.forward_without_audio(v).shape == (2, 80, 128)
    assert disc.eval()(v, s).shape == (2, 32)


def test_eval_mode_is_deterministic(small):
    net, _ = small
    v, s = _inputs(SMALL)
    with torch.no_grad():
        assert torch.equal(net(v, s)[1], net(v, s)[1])


def test_build_is_seeded():
    a, _ = build(SMALL, seed=4)
    b, _ = build(SMALL, seed=4)
    c, _ = build(SMALL, seed=5)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_discriminator_seed_is_independent():
    n1, d1 = build(SMALL, seed=0, disc_seed=10)
    n2, d2 = build(SMALL, seed=0, disc_seed=11)
    assert all(torch.equal(n1.state_dict()[k], n2.state_dict()[k]) for k in n1.state_dict())
    assert not all(torch.equal(d1.state_dict()[k], d2.state_dict()[k]) for k in d1.state_dict())


def _np_lstm_dir(x, w_ih, w_hh, b):
    T, H = x.shape[0], w_hh.shape[1]
    h, c, out = np.zeros(H), np.zeros(H), []
    sig = lambda z: 1 / (1 + np.exp(-z))
    for t in range(T):
        z = w_ih @ x[t] + w_hh @ h + b
        i, f, g, o = sig(z[:H]), sig(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), sig(z[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def test_visual_encoder_matches_numpy_oracle():
    torch.manual_seed(0)
    net = RegNet(TINY).eval()
    for m in net.encoder.modules():  # non-trivial batch-norm statistics
        if isinstance(m, torch.nn.BatchNorm1d):
            m.running_mean.uniform_(-0.5, 0.5)
            m.running_var.uniform_(0.5, 2.0)
            m.weight.data.uniform_(0.5, 1.5)
            m.bias.data.uniform_(-0.2, 0.2)
    v = torch.rand(1, TINY.T, TINY.F, dtype=torch.float64)
    net = net.double()
    with torch.no_grad():
        got = net.encode_visual(v)[0].numpy()

    x = v[0].numpy()
    for block in net.encoder.convs:
        conv, bn = block[0], block[1]
        W, bias = conv.weight.detach().numpy(), conv.bias.detach().numpy()
        k = W.shape[2]
        xp = np.pad(x, ((k // 2, k // 2), (0, 0)))
        y = np.stack([np.einsum("oik,ki->o", W, xp[t:t + k]) for t in range(x.shape[0])]) + bias
        y = (y - bn.running_mean.numpy()) / np.sqrt(bn.running_var.numpy() + bn.eps)
        y = y * bn.weight.detach().numpy() + bn.bias.detach().numpy()
        x = np.maximum(y, 0)
    lstm = net.encoder.lstm
    P = {n: p.detach().numpy() for n, p in lstm.named_parameters()}
    fwd = _np_lstm_dir(x, P["weight_ih_l0"], P["weight_hh_l0"], P["bias_ih_l0"] + P["bias_hh_l0"])
    bwd = _np_lstm_dir(x[::-1], P["weight_ih_l0_reverse"], P["weight_hh_l0_reverse"],
                       P["bias_ih_l0_reverse"] + P["bias_hh_l0_reverse"])[::-1]
    np.testing.assert_allclose(got, np.concatenate([fwd, bwd], axis=1), atol=1e-12)


class TestRegularizer:
    def test_full_downsample_is_time_constant(self, small):
        net, _ = small
        r = net.regularize_audio(_inputs(SMALL)[1])
        assert torch.equal(r, r[:, :, :1].expand_as(r))

    def test_finer_downsample_varies_in_time(self):
        net, _ = build(SMALL.with_variant("S4D3"))
        r = net.eval().regularize_audio(_inputs(SMALL)[1])
        assert not torch.allclose(r, r[:, :, :1].expand_as(r))

    def test_output_shape_law(self):
        for S in (1, 2, 4, 8, 16, 32):
            net, _ = build(SMALL.with_variant(f"S{S}D3"))
            assert net.eval().regularize_audio(_inputs(SMALL)[1]).shape == (3, 6, SMALL.T)

    def test_downsample_larger_than_clip_rejected(self):
        with pytest.raises(ConfigError, match="reg_downsample"):
            SMALL.with_variant("S64D3")

    def test_non_dividing_downsample_rejected(self):
        with pytest.raises(ConfigError, match="divide"):
            SMALL.with_variant("S5D3")

    def test_disabled_regularizer_outputs_zeros(self):
        net, _ = build(ModelConfig(**{**SMALL.to_dict(), "use_regularizer": False}))
        assert torch.count_nonzero(net.eval().regularize_audio(_inputs(SMALL)[1])) == 0


def test_parse_variant():
    assert parse_variant("S860D32") == (860, 32)
    with pytest.raises(ConfigError):
        parse_variant("D32S860")
    assert ModelConfig().with_variant("S4D16").variant_name() == "S4D16"


def test_bad_upsampling_ratio():
    with pytest.raises(ConfigError, match="4"):
        ModelConfig(T=32, T_audio=96, reg_downsample=32)


class TestGenerator:
    def test_residual_identity(self, small):
        net, _ = small
        v, s = _inputs(SMALL)
        with torch.no_grad():
            vf, r = net.encode_visual(v), net.regularize_audio(s)
            initial, final = net.generate(vf, r)
            h = net.generator
            residual = SMALL.spec_scale * h.postnet((initial - SMALL.spec_center) / SMALL.spec_scale)
        assert torch.equal(final, initial + residual)

    def test_zeroed_postnet_returns_initial(self, small):
        net, _ = small
        with torch.no_grad():
            net.generator.postnet.out.weight.zero_()
            net.generator.postnet.out.bias.zero_()
            initial, final = net(*_inputs(SMALL))
        assert torch.equal(initial, final)

    def test_zero_path_equals_explicit_zero_vector(self, small):
        net, _ = small
        v, _ = _inputs(SMALL)
        with torch.no_grad():
            explicit = net.generate(net.encode_visual(v), torch.zeros(3, SMALL.reg_width, SMALL.T))[1]
            assert torch.equal(net.forward_without_audio(v), explicit)

    def test_zeroed_regularizer_makes_paths_agree(self, small):
        net, _ = small
        v, s = _inputs(SMALL)
        with torch.no_grad():
            for p in net.regularizer.lstm.parameters():
                p.zero_()
            assert torch.equal(net.forward_with_audio(v, s), net.forward_without_audio(v))

    def test_test_path_takes_no_audio(self, small):
        net, _ = small
        v, s = _inputs(SMALL)
        s2 = s + 5
        with torch.no_grad():
            a = net(v, None)[1]
            net.forward_with_audio(v, s2)  # must not leave state behind in eval mode
            assert torch.equal(a, net(v, None)[1])

    def test_mismatched_lengths_rejected(self, small):
        net, _ = small
        with pytest.raises(ConfigError):
            net(torch.rand(2, SMALL.T + 1, SMALL.F))
        with pytest.raises(ConfigError):
            net.regularize_audio(torch.rand(2, SMALL.n_mels, SMALL.T_audio - 1))


def test_discriminator_scores_are_probabilities(small):
    _, disc = small
    v, s = _inputs(SMALL)
    d = disc(v, s)
    assert d.shape[1] > 1
    assert torch.all((d > 0) & (d < 1))


def test_discriminator_rejects_bad_shapes(small):
    _, disc = small
    v, s = _inputs(SMALL)
    with pytest.raises(ConfigError):
        disc(v[:, :-1], s)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, small):
        net, disc = small
        save_params(tmp_path / "m.pt", net, disc)
        net2, disc2, _ = load_params(tmp_path / "m.pt", SMALL)
        v, s = _inputs(SMALL)
        with torch.no_grad():
            assert torch.equal(net(v, s)[1], net2.eval()(v, s)[1])
            assert torch.equal(disc(v, s), disc2.eval()(v, s))

    def test_mismatched_config_names_field(self, tmp_path, small):
        net, disc = small
        save_params(tmp_path / "m.pt", net, disc)
        other = ModelConfig(**{**SMALL.to_dict(), "reg_dim": 5})
        with pytest.raises(IncompatibleCheckpoint, match="reg_dim"):
            load_params(tmp_path / "m.pt", other)

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.pt").write_bytes(b"nope")
        with pytest.raises(OSError):
            load_params(tmp_path / "bad.pt")

    def test_config_hash_tracks_fields(self):
        assert SMALL.hash() == ModelConfig(**SMALL.to_dict()).hash()
        assert SMALL.hash() != SMALL.with_variant("S4D3").hash()


def test_gradient_check_tiny_double():
    """Analytic gradient of the full objective vs central differences."""
    net, disc = build(TINY, seed=1)
    net, disc = net.double().train(), disc.double().train()
    v, s = _inputs(TINY, batch=3, seed=2, dtype=torch.float64)
    assert gradient_check(net, disc, v, s, TrainConfig(alpha=0.7, beta=0.01)) < 1e-4
