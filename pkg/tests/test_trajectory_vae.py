import numpy as np
import pytest
import torch

from latentplan.codecs import LatentCodec, RawCodec, SkillCodec
from latentplan.diff_core import TrainSettings, fd_check, train_loop
from latentplan.env_data import build_dataset, make_env
from latentplan.rng import torch_gen
from latentplan.trajectory_vae import (ReturnHead, TrajectoryVAE, VaeConfig, channel_mse, encode, gaussian_kl,
                                       join_tokens, max_pool_time, split_tokens, tokenize, train_vae, vae_loss)

SMALL = dict(z_dim=3, d_model=8, n_heads=2, n_blocks=1, feat_dim=6, action_hidden=(8,), rr_hidden=(8,))


@pytest.fixture(scope="module")
def pm_data():
    env = make_env("pointmass2d", horizon=16)
    ds = build_dataset(env, [("medium", 1.0)], 8, seed=0)
    return ds, tokenize(ds, 8, 4, stride=4)


def test_max_pool_example():
    x = torch.tensor([1.0, 3.0, 5.0, 4.0]).reshape(1, 4, 1)
    assert max_pool_time(x, 2).flatten().tolist() == [3.0, 5.0]
    with pytest.raises(ValueError):
        max_pool_time(torch.zeros(1, 5, 1), 2)


def test_max_pool_ties_route_gradient_to_first_index():
    x = torch.tensor([2.0, 2.0, 1.0, 1.0]).reshape(1, 4, 1).requires_grad_(True)
    max_pool_time(x, 2).sum().backward()
    assert x.grad.flatten().tolist() == [1.0, 0.0, 1.0, 0.0]


def test_zero_weight_encoder_samples_pure_noise():
    cfg = VaeConfig(4, 2, 8, 4, **SMALL)
    vae = TrajectoryVAE(cfg)
    with torch.no_grad():
        vae.phi["head"].weight.zero_()
        vae.phi["head"].bias.zero_()
    tokens = torch.randn(3, 8, cfg.token_dim)
    mean, logvar, z = encode(vae, tokens, torch_gen(0, "t"))
    assert torch.all(mean == 0) and torch.all(logvar == 0)
    eps = torch.randn(mean.shape, generator=torch_gen(0, "t"))
    assert torch.equal(z, eps)


def test_shape_contract():
    cfg = VaeConfig(4, 2, 64, 4, z_dim=8, d_model=8, n_blocks=1)
    vae = TrajectoryVAE(cfg)
    tokens = torch.randn(2, 64, cfg.token_dim)
    mean, logvar, z = encode(vae, tokens, torch_gen(0, "s"))
    assert z.shape == (2, 16, 8) and mean.shape == logvar.shape == z.shape
    assert vae.decoder_input(z, tokens[:, 0, :4]).shape == (2, 64, 8 + 4)
    out = vae.decode(z, tokens[:, 0, :4])
    assert out["states"].shape == (2, 64, 4) and out["actions"].shape == (2, 64, 2)
    assert out["rewards"].shape == out["rtg"].shape == (2, 64)
    assert join_tokens(out).shape == tokens.shape
    with pytest.raises(ValueError):
        vae.decoder_input(z[:, :15], tokens[:, 0, :4])
    with pytest.raises(ValueError):
        VaeConfig(4, 2, 63, 4)


def test_positional_embedding_separates_positions():
    cfg = VaeConfig(4, 2, 16, 4, **SMALL)
    vae = TrajectoryVAE(cfg)
    x = vae.decoder_input(torch.randn(1, 4, cfg.z_dim), torch.randn(1, 4))
    x = x[:, :1].expand(1, 16, -1)
    h = vae.psi_state.embed(x)[0]
    assert len({tuple(r.tolist()) for r in h}) == 16


def test_inverse_dynamics_pairs_and_final_duplicate():
    cfg = VaeConfig(2, 1, 4, 2, **SMALL)
    vae = TrajectoryVAE(cfg)
    seen = []
    vae.psi_action.register_forward_hook(lambda m, inp, out: seen.append(inp[0]))
    states = torch.arange(8.0).reshape(1, 4, 2)
    vae.decode_actions(states)
    pairs = seen[0][0]
    assert torch.equal(pairs[0], torch.tensor([0.0, 1.0, 2.0, 3.0]))
    assert torch.equal(pairs[3], torch.tensor([6.0, 7.0, 6.0, 7.0]))


def test_kl_closed_form():
    assert gaussian_kl(torch.zeros(1, 3), torch.zeros(1, 3)).item() == 0.0
    assert gaussian_kl(torch.tensor([[1.5]]), torch.zeros(1, 1)).item() == pytest.approx(1.5 ** 2 / 2)


def test_kl_matches_monte_carlo():
    g = torch.Generator().manual_seed(0)
    for mu, sigma in [(0.7, 0.5), (-1.2, 1.8), (1.0, 0.3)]:
        x = mu + sigma * torch.randn(100_000, generator=g, dtype=torch.float64)
        logq = -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma)
        logp = -0.5 * x ** 2
        mc = float((logq - logp).mean())
        exact = gaussian_kl(torch.tensor([[mu]]), torch.tensor([[2 * np.log(sigma)]])).item()
        assert abs(mc - exact) / exact < 0.01


def test_loss_composition(pm_data):
    _, data = pm_data
    cfg = VaeConfig(4, 2, 8, 4, kl_weight=1e-6, **SMALL)
    vae = TrajectoryVAE(cfg)
    with torch.no_grad():
        total, recon, kl = vae_loss(vae, data.tokens[:4], data.s1[:4], torch_gen(0, "l"))
    assert float(total) == pytest.approx(float(recon) + 1e-6 * float(kl), rel=1e-6)
    assert 1e-6 * 10.0 == pytest.approx(1e-5)


def test_perfect_reconstruction_and_standard_posterior_give_zero_loss():
    cfg = VaeConfig(2, 1, 4, 2, **SMALL)
    vae = TrajectoryVAE(cfg)
    tokens = torch.randn(2, 4, cfg.token_dim)

    def fake_encode(tok):
        return torch.zeros(2, 2, cfg.z_dim), torch.zeros(2, 2, cfg.z_dim)

    vae.encode = fake_encode
    vae.decode = lambda z, s1: split_tokens(tokens, 2, 1)
    total, recon, kl = vae_loss(vae, tokens, tokens[:, 0, :2])
    assert float(total) == 0.0 and float(kl) == 0.0


def test_nonfinite_loss_reports_components():
    cfg = VaeConfig(2, 1, 4, 2, **SMALL)
    vae = TrajectoryVAE(cfg)
    tokens = torch.full((1, 4, cfg.token_dim), float("nan"))
    with pytest.raises(FloatingPointError, match="recon=.*kl="):
        vae_loss(vae, tokens, tokens[:, 0, :2])


def test_vae_loss_gradients(pm_data):
    torch.set_default_dtype(torch.float64)
    _, data = pm_data
    cfg = VaeConfig(4, 2, 8, 4, kl_weight=1e-2, **SMALL)
    vae = TrajectoryVAE(cfg).double()
    names = [n for n, _ in vae.named_parameters()]
    tok, s1 = data.tokens[:3].double(), data.s1[:3].double()

    def fn(ts):
        return torch.func.functional_call(_LossModule(vae), {f"vae.{n}": ts[n] for n in names}, (tok, s1))

    err = fd_check(fn, dict(vae.named_parameters()), max_coords=6)
    assert max(err.values()) < 1e-4


class _LossModule(torch.nn.Module):
    def __init__(self, vae):
        super().__init__()
        self.vae = vae

    def forward(self, tok, s1):
        return vae_loss(self.vae, tok, s1, torch_gen(0, "fd"))[0].reshape(1)


def test_training_is_deterministic(pm_data):
    _, data = pm_data
    cfg = VaeConfig(4, 2, 8, 4, **SMALL)
    st = TrainSettings(steps=20, batch_size=8, lr=3e-3)
    a, ca = train_vae(data, cfg, st, seed=3)
    b, cb = train_vae(data, cfg, st, seed=3)
    assert ca == cb
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_heavy_kl_weight_hurts_reconstruction(pm_data):
    _, data = pm_data
    st = TrainSettings(steps=300, batch_size=16, lr=3e-3)
    light, heavy = [], []
    for seed in range(3):
        for w, acc in ((1e-6, light), (1.0, heavy)):
            vae, _ = train_vae(data, VaeConfig(4, 2, 8, 4, kl_weight=w, **SMALL), st, seed)
            acc.append(np.mean(list(channel_mse(vae, data).values())))
    assert np.mean(heavy) > np.mean(light)


def test_action_head_recovers_executed_actions():
    env = make_env("pointmass2d", horizon=16)
    ds = build_dataset(env, [("medium", 1.0)], 32, seed=1)
    data = tokenize(ds, 16, 4)
    ch = data.split_channels()
    vae = TrajectoryVAE(VaeConfig(4, 2, 16, 4, **{**SMALL, "action_hidden": (64, 64)}))
    s, a = ch["states"], ch["actions"]

    def loss_fn(step):
        pred = vae.decode_actions(s)
        return (pred[:, :-1] - a[:, :-1]).pow(2).mean(), {}

    train_loop(vae, loss_fn, TrainSettings(steps=1500, lr=3e-3, lr_final_frac=0.05), "inverse-dynamics",
               dict(vae.psi_action.named_parameters()))
    with torch.no_grad():
        pred = vae.decode_actions(s)[:, :-1]
    raw_pred = ds.norm.denormalize("actions", pred.double().numpy())
    raw_true = ds.norm.denormalize("actions", a[:, :-1].double().numpy())
    assert float(np.mean((raw_pred - raw_true) ** 2)) < 1e-3


def test_codec_channel_counts(pm_data):
    ds, _ = pm_data
    skill = SkillCodec(TrajectoryVAE(VaeConfig(4, 2, 8, 4, with_returns=False, **SMALL)), ReturnHead(4, 2, (8,)),
                       ds.norm)
    data = skill.tokenize(ds)
    assert data.tokens.shape[-1] == 6 and not data.with_returns
    z = torch.randn(2, 2, SMALL["z_dim"])
    out = skill.decode(z, data.s1[:2])
    assert out["rtg"].shape == (2, 8)
    raw = RawCodec(4, 2, 8, ds.norm)
    rdata = raw.tokenize(ds)
    assert rdata.tokens.shape[-1] == 8 and torch.equal(raw.encode(rdata), rdata.tokens)
    with pytest.raises(ValueError):
        LatentCodec(skill.vae, ds.norm)
    with pytest.raises(ValueError):
        SkillCodec(TrajectoryVAE(VaeConfig(4, 2, 8, 4, **SMALL)), ReturnHead(4, 2), ds.norm)


def test_energy_is_negative_return_sum(pm_data):
    ds, _ = pm_data
    raw = RawCodec(4, 2, 2, ds.norm)
    z = torch.zeros(1, 2, 8)
    # normalized rtg chosen so that the raw returns are [1, 2]
    for t, g in enumerate((1.0, 2.0)):
        z[0, t, 7] = float(ds.norm.normalize("rtg", np.array([g]))[0])
    assert raw.energy(z, z[:, 0, :4]).item() == pytest.approx(-3.0, abs=1e-5)
