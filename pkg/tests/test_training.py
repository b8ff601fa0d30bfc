import math
import struct

import numpy as np
import pytest
import torch

from gau.critic import Critic, CriticConfig
from gau.dataset import ImageSet, SampleRecord, make_synthetic_dataset
from gau.generator import GeneratorConfig
from gau.numerics import Adam, param_grad_check
from gau.training import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    CheckpointTruncated,
    CheckpointVersionError,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    TrainState,
    cgan_generator_loss,
    cgan_losses,
    critic_head,
    critic_loss,
    generator_loss,
    gradient_penalty,
    interpolate,
    load_checkpoint,
    parameter_digest,
    read_checkpoint_entries,
    save_checkpoint,
    train,
)

GEN = GeneratorConfig(input_size=16, base_filters=2, num_blocks=6, latent_dim=8,
                      layers_per_block=1, latent_channels=4)
CRIT = CriticConfig(growth_rate=2, num_dense_blocks=3, layers_per_block=1, input_size=16)


def tiny_config(**kw):
    base = dict(batch_size=4, n_critic=2, total_steps=100, seed=3, dtype="float64", checkpoint_every=10)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return make_synthetic_dataset(num_classes=2, n_per_class=12, image_size=16, seed=0)


def param_digest(module):
    return hash(tuple(p.detach().numpy().tobytes() for p in module.parameters()))


# -- config ----------------------------------------------------------------------


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lambda_gp, cfg.alpha, cfg.beta1, cfg.beta2) == (10.0, 1e-4, 0.0, 0.9)
    assert (cfg.batch_size, cfg.n_critic, cfg.loss_mode) == (16, 5, "wgan_gp")


@pytest.mark.parametrize("kw", [dict(lambda_gp=-1), dict(n_critic=0), dict(batch_size=1),
                                dict(loss_mode="hinge"), dict(dtype="float16"),
                                dict(interpolate_from="x_g")])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- losses ----------------------------------------------------------------------


def test_interpolate_endpoints_and_arithmetic():
    a, b = torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4)
    assert torch.equal(interpolate(a, b, 1.0), a)
    assert torch.equal(interpolate(a, b, 0.0), b)
    assert float(interpolate(torch.tensor([4.0]), torch.tensor([0.0]), 0.25)) == 1.0


def test_interpolate_per_sample_stays_between_endpoints():
    a, b = torch.rand(5, 3, 4, 4), torch.rand(5, 3, 4, 4)
    eps = torch.rand(5)
    x = interpolate(a, b, eps)
    lo, hi = torch.minimum(a, b), torch.maximum(a, b)
    assert torch.all(x >= lo - 1e-7) and torch.all(x <= hi + 1e-7)
    assert torch.allclose(x[2], eps[2] * a[2] + (1 - eps[2]) * b[2])


def test_interpolate_errors():
    with pytest.raises(ValueError, match="shape"):
        interpolate(torch.zeros(2, 3), torch.zeros(3, 2), 0.5)
    with pytest.raises(ValueError, match="epsilon"):
        interpolate(torch.zeros(2), torch.zeros(2), 1.5)


class LinearCritic(torch.nn.Module):
    def __init__(self, u):
        super().__init__()
        self.u = torch.nn.Parameter(u)

    def forward(self, x_cond, x):
        return x.flatten(1) @ self.u


class ConstantCritic(torch.nn.Module):
    def forward(self, x_cond, x):
        return torch.full((x.shape[0],), 2.5)


def test_gradient_penalty_constant_critic():
    x = torch.rand(3, 3, 4, 4)
    assert float(gradient_penalty(ConstantCritic(), x, x, x, 0.5, 10.0)) == pytest.approx(10.0)


@pytest.mark.parametrize("norm,expected", [(1.0, 0.0), (3.0, 40.0), (0.5, 2.5)])
def test_gradient_penalty_linear_critic(norm, expected, f64):
    u = torch.randn(48, generator=torch.Generator().manual_seed(0))
    critic = LinearCritic(norm * u / u.norm())
    x = torch.rand(4, 3, 4, 4)
    gp = gradient_penalty(critic, x, torch.rand_like(x), x, torch.rand(4), 10.0)
    assert float(gp.detach()) == pytest.approx(expected, abs=1e-12)


def test_gradient_penalty_differentiates_through_the_input_gradient(f64):
    # d/du of 10 (||u|| - 1)^2 = 20 (||u|| - 1) u / ||u||
    u = torch.randn(48, generator=torch.Generator().manual_seed(1))
    critic = LinearCritic(u.clone())
    x = torch.rand(2, 3, 4, 4)
    gp = gradient_penalty(critic, x, x, x, 0.3, 10.0)
    (g,) = torch.autograd.grad(gp, critic.u)
    assert torch.allclose(g, 20 * (u.norm() - 1) * u / u.norm())


def test_gradient_penalty_rejects_non_finite():
    critic = LinearCritic(torch.full((48,), float("nan")))
    x = torch.rand(2, 3, 4, 4)
    with pytest.raises(TrainingDiverged):
        gradient_penalty(critic, x, x, x, 0.5)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_penalty_param_grad_check_on_dense_critic(seed, f64):
    critic = Critic(CriticConfig(growth_rate=2, num_dense_blocks=2, layers_per_block=2,
                                 input_size=8, dropout_rate=0.0), seed=seed).double().train()
    gen = torch.Generator().manual_seed(seed)
    x_i, x_r, x_f = (torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64) for _ in range(3))
    eps = torch.rand(2, generator=gen, dtype=torch.float64)
    report = param_grad_check(lambda: gradient_penalty(critic, x_i, x_r, x_f, eps, 10.0),
                              critic, tolerance=1e-3, step=1e-6, seed=seed)
    assert report.passed, report


def test_gradient_penalty_is_non_negative_on_random_critics():
    for seed in range(5):
        critic = Critic(CriticConfig(growth_rate=2, num_dense_blocks=2, layers_per_block=1, input_size=8),
                        seed=seed).eval()
        x = torch.rand(3, 3, 8, 8)
        assert float(gradient_penalty(critic, x, x, torch.rand_like(x), torch.rand(3)).detach()) >= 0


def test_critic_loss_examples():
    s = torch.tensor([0.3, -1.2, 4.0])
    assert float(critic_loss(s, s)) == 0.0
    assert float(critic_loss(torch.tensor([1.0, 3.0]), torch.tensor([2.0, 4.0]))) == -1.0
    assert float(critic_loss(torch.full((4,), 2.75), torch.full((4,), 2.5))) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        critic_loss(torch.zeros(0), torch.zeros(0))
    with pytest.raises(ValueError):
        critic_loss(torch.zeros(2), torch.zeros(3))


def test_generator_loss_examples():
    assert float(generator_loss(torch.zeros(5))) == 0.0
    assert float(generator_loss(torch.tensor([2.0, 4.0]))) == -3.0
    s = torch.randn(6)
    assert float(generator_loss(s + 1.5)) == pytest.approx(float(generator_loss(s)) - 1.5)
    with pytest.raises(ValueError):
        generator_loss(torch.zeros(0))


def test_cgan_losses_examples():
    half = torch.full((4,), 0.5, dtype=torch.float64)
    d, g = cgan_losses(half, half)
    assert float(d) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert float(g) == pytest.approx(math.log(2), abs=1e-12)
    d, _ = cgan_losses(torch.full((3,), 1 - 1e-12), torch.full((3,), 1e-12))
    assert float(d) < 1e-6
    # exact 0 and 1 are clamped, not infinite
    d, g = cgan_losses(torch.tensor([0.0]), torch.tensor([1.0]))
    assert math.isfinite(float(d)) and math.isfinite(float(g))
    assert float(cgan_generator_loss(torch.tensor([0.5]))) == pytest.approx(math.log(2))


def test_critic_head_is_fully_determined_by_mode():
    s = torch.tensor([-3.0, 0.0, 7.0])
    assert torch.equal(critic_head("wgan_gp")(s), s)
    assert torch.equal(critic_head("cgan")(s), torch.sigmoid(s))
    with pytest.raises(ValueError):
        critic_head("bogus")


# -- convex surrogate ----------------------------------------------------------------


class FrozenGenerator(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def sample_latent(self, n, generator=None):
        return torch.randn(n, 2, generator=generator, dtype=torch.float64)

    def forward(self, x_j, z, class_ids=None):
        return torch.full_like(x_j, self.value)


class TableCritic(torch.nn.Module):
    """One free scalar per pixel; the score is their dot product with the image."""

    def __init__(self, width):
        super().__init__()
        self.table = torch.nn.Parameter(torch.zeros(3 * width, dtype=torch.float64))

    def forward(self, x_cond, x):
        return x.flatten(1) @ self.table


def test_critic_loss_decreases_monotonically_on_convex_surrogate():
    width = 8
    images = np.full((6, 1, width, 3), 0.8, dtype=np.float32)
    data = ImageSet([SampleRecord(f"{k}", 0, f"p{k}") for k in range(6)], images, 1)
    cfg = TrainConfig(lambda_gp=0.0, batch_size=4, n_critic=1, dtype="float64", alpha=1e-2)
    gen, critic = FrozenGenerator(0.2), TableCritic(width)
    hyper = dict(alpha=cfg.alpha, beta1=cfg.beta1, beta2=cfg.beta2)
    state = TrainState(cfg, GEN, CRIT, gen, critic, Adam([], **hyper),
                       Adam(critic.named_parameters(), **hyper),
                       np.random.default_rng(0), torch.Generator().manual_seed(0))
    trainer = Trainer(state, data)
    losses = [trainer.critic_update()[0] for _ in range(100)]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    # with a constant gradient every Adam step moves each entry by alpha
    assert losses[-1] == pytest.approx(losses[0] - 99 * cfg.alpha * 24 * 0.6, rel=1e-6)


# -- the loop -----------------------------------------------------------------------


def test_same_seed_gives_identical_losses(data):
    a = train(tiny_config(), data, GEN, CRIT, steps=10)
    b = train(tiny_config(), data, GEN, CRIT, steps=10)
    assert a.history == b.history
    assert parameter_digest(a.generator) == parameter_digest(b.generator)
    c = train(tiny_config(seed=4), data, GEN, CRIT, steps=10)
    assert c.history != a.history


def test_loss_history_is_finite_and_counted(data):
    state = train(tiny_config(), data, GEN, CRIT, steps=5)
    assert [r.step for r in state.history] == [0, 1, 2, 3, 4]
    assert state.step == 5
    for r in state.history:
        assert all(math.isfinite(v) for v in (r.critic_loss, r.gp, r.gen_loss))
        assert r.gp >= 0


def test_resume_equivalence(data, tmp_path):
    full = train(tiny_config(), data, GEN, CRIT, steps=61)
    ckpt = tmp_path / "run.ckpt"
    first = train(tiny_config(), data, GEN, CRIT, steps=50, checkpoint_path=ckpt)
    assert first.step == 50
    resumed = load_checkpoint(ckpt)
    assert resumed.history == first.history
    resumed = train(tiny_config(), data, steps=11, resume=resumed)
    assert resumed.history[60] == full.history[60]
    assert resumed.history == full.history
    assert parameter_digest(resumed.generator) == parameter_digest(full.generator)
    assert parameter_digest(resumed.critic) == parameter_digest(full.critic)


def test_updates_touch_only_their_own_network(data):
    state = TrainState.initial(tiny_config(), GEN, CRIT)
    trainer = Trainer(state, data)
    state.generator.train()
    state.critic.train()
    g0, c0 = param_digest(state.generator), param_digest(state.critic)
    trainer.critic_update()
    g1, c1 = param_digest(state.generator), param_digest(state.critic)
    assert g1 == g0 and c1 != c0
    trainer.generator_update()
    assert param_digest(state.critic) == c1 and param_digest(state.generator) != g1


def test_batches_are_class_homogeneous_and_cover_classes(data):
    state = TrainState.initial(tiny_config(), GEN, CRIT)
    trainer = Trainer(state, data)
    seen = []
    for _ in range(40):
        x_i, x_j, labels = trainer._batch()
        assert len(set(labels.tolist())) == 1
        seen.append(int(labels[0]))
    assert set(seen) == {0, 1}


def test_trainer_rejects_singleton_class():
    data = make_synthetic_dataset(num_classes=2, n_per_class=3, image_size=16, seed=0)
    data = data.subset([0, 1, 2, 3])
    with pytest.raises(ValueError, match="fewer than 2"):
        Trainer(TrainState.initial(tiny_config(), GEN, CRIT), data)


def test_cgan_mode_trains(data):
    state = train(tiny_config(loss_mode="cgan"), data, GEN, CRIT, steps=3)
    first = state.history[0]
    assert first.gp == 0.0
    # discriminator loss of a near-chance sigmoid head sits near 2 ln 2
    assert 0.5 < first.critic_loss < 3.0
    assert first.gen_loss > 0


def test_interpolate_from_x_j_changes_the_run(data):
    a = train(tiny_config(), data, GEN, CRIT, steps=2)
    b = train(tiny_config(interpolate_from="x_j"), data, GEN, CRIT, steps=2)
    assert a.history[0].critic_loss == b.history[0].critic_loss or a.history[0].gp != b.history[0].gp


def test_float32_run(data):
    state = train(tiny_config(dtype="float32"), data, GEN, CRIT, steps=2)
    assert next(state.generator.parameters()).dtype == torch.float32


def test_divergence_keeps_last_good_checkpoint(data, tmp_path):
    ckpt = tmp_path / "div.ckpt"
    state = TrainState.initial(tiny_config(), GEN, CRIT)
    trainer = Trainer(state, data)

    def poison(record):
        if record.step == 2:
            with torch.no_grad():
                next(state.critic.parameters()).fill_(float("nan"))

    with pytest.raises(TrainingDiverged):
        trainer.run(10, checkpoint_path=ckpt, checkpoint_every=2, on_step=poison)
    kept = load_checkpoint(ckpt)
    assert kept.step == 2
    assert all(torch.isfinite(p).all() for p in kept.critic.parameters())


def test_periodic_and_final_checkpoints(data, tmp_path):
    ckpt = tmp_path / "c.ckpt"
    seen = []
    state = TrainState.initial(tiny_config(), GEN, CRIT)

    def spy(record):
        if ckpt.exists():
            seen.append(int(read_checkpoint_entries(ckpt)["state/step"][0]))

    Trainer(state, data).run(5, checkpoint_path=ckpt, checkpoint_every=2, on_step=spy)
    assert sorted(set(seen)) == [2, 4]
    assert load_checkpoint(ckpt).step == 5
    assert not (tmp_path / "c.ckpt.tmp").exists()


# -- checkpoint format ---------------------------------------------------------------


@pytest.fixture(scope="module")
def saved(data, tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "s.ckpt"
    state = train(tiny_config(), data, GEN, CRIT, steps=3, checkpoint_path=path)
    return state, path


def test_round_trip_is_bit_identical(saved):
    state, path = saved
    back = load_checkpoint(path)
    for (n, a), (_, b) in zip(state.generator.state_dict().items(), back.generator.state_dict().items()):
        assert torch.equal(a, b), n
    for (n, a), (_, b) in zip(state.critic.state_dict().items(), back.critic.state_dict().items()):
        assert torch.equal(a, b), n
    for opt_a, opt_b in ((state.gen_opt, back.gen_opt), (state.critic_opt, back.critic_opt)):
        ta, tb = opt_a.state_tensors(), opt_b.state_tensors()
        assert ta.keys() == tb.keys()
        assert all(torch.equal(ta[k], tb[k]) for k in ta)
    assert back.step == 3 and back.history == state.history
    assert back.config == state.config and back.gen_config == GEN and back.critic_config == CRIT
    assert back.rng.bit_generator.state == state.rng.bit_generator.state
    assert torch.equal(back.torch_rng.get_state(), state.torch_rng.get_state())


def test_config_is_echoed_as_text(saved):
    entries = read_checkpoint_entries(saved[1])
    text = entries["__config__"]
    assert "[training]" in text and "lambda_gp = 10.0" in text and "[critic]" in text


def test_header_layout(saved):
    raw = saved[1].read_bytes()
    assert raw.startswith(MAGIC)
    version, count = struct.unpack("<II", raw[len(MAGIC):len(MAGIC) + 8])
    assert version == FORMAT_VERSION
    assert count == len(read_checkpoint_entries(saved[1]))


def test_corrupted_length_field_is_truncation(saved, tmp_path):
    raw = bytearray(saved[1].read_bytes())
    # first entry: name length, name, tag, rank, (no extents for text), payload length
    (name_len,) = struct.unpack("<H", raw[16:18])
    off = 18 + name_len + 2
    raw[off:off + 8] = struct.pack("<Q", 10 ** 12)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointTruncated, match="truncated"):
        load_checkpoint(bad)


@pytest.mark.parametrize("cut", [4, 12, 100, -1])
def test_cut_short_file_is_truncation(saved, tmp_path, cut):
    raw = saved[1].read_bytes()
    bad = tmp_path / "cut.ckpt"
    bad.write_bytes(raw[:cut] if cut > 0 else raw[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_future_version_is_rejected(saved, tmp_path):
    raw = bytearray(saved[1].read_bytes())
    raw[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
    bad = tmp_path / "future.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="newer"):
        load_checkpoint(bad)


def test_bad_magic_and_trailing_bytes(saved, tmp_path):
    raw = saved[1].read_bytes()
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "m.ckpt")
    (tmp_path / "t.ckpt").write_bytes(raw + b"\0\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_missing_entries_are_reported(saved, tmp_path):
    state = load_checkpoint(saved[1])
    state.critic = Critic(CriticConfig(growth_rate=3, num_dense_blocks=3, layers_per_block=1, input_size=16))
    save_checkpoint(state, tmp_path / "mismatch.ckpt")
    with pytest.raises(CheckpointError, match="do not match"):
        load_checkpoint(tmp_path / "mismatch.ckpt")
