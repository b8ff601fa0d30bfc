"""Adversarial training: alternating critic / generator Adam updates.

Each outer step runs ``n_critic`` critic updates on the Wasserstein loss
plus a gradient penalty at interpolants, then one generator update on the
negated fake score.  A ``cgan`` mode swaps in the log-likelihood losses of
a conditional GAN with a sigmoid head.  Training state round-trips through
a versioned binary checkpoint so a resumed run reproduces the original.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from gau.critic import Critic, CriticConfig
from gau.dataset import ImageSet, sample_conditional_batch
from gau.generator import Generator, GeneratorConfig
from gau.numerics import Adam, renorm_limits, set_renorm_limits

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
LOSS_MODES = ("wgan_gp", "cgan")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_gp: float = 10.0
    alpha: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    batch_size: int = 16
    n_critic: int = 5
    # counted in outer optimizer steps, not epochs
    total_steps: int = 5000
    seed: int = 0
    loss_mode: str = "wgan_gp"
    dtype: str = "float32"
    checkpoint_every: int = 500
    interpolate_from: str = "x_i"  # endpoint paired with x_g in the interpolant: x_i or x_j

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ValueError(f"lambda_gp must be >= 0, got {self.lambda_gp}")
        if self.n_critic < 1:
            raise ValueError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (batch renormalization), got {self.batch_size}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.interpolate_from not in ("x_i", "x_j"):
            raise ValueError(f"interpolate_from must be x_i or x_j, got {self.interpolate_from!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


# -- losses -------------------------------------------------------------------


def interpolate(x_i: torch.Tensor, x_g: torch.Tensor, epsilon) -> torch.Tensor:
    """``epsilon * x_i + (1 - epsilon) * x_g``; ``epsilon`` is a scalar or one value per sample."""
    if x_i.shape != x_g.shape:
        raise ValueError(f"shape mismatch: {tuple(x_i.shape)} vs {tuple(x_g.shape)}")
    eps = torch.as_tensor(epsilon, dtype=x_i.dtype)
    if torch.any((eps < 0) | (eps > 1)):
        raise ValueError("epsilon must lie in [0, 1]")
    if eps.dim() == 1:
        eps = eps.reshape((-1,) + (1,) * (x_i.dim() - 1))
    return eps * x_i + (1 - eps) * x_g


def gradient_penalty(critic, x_cond: torch.Tensor, x_real: torch.Tensor, x_fake: torch.Tensor,
                     epsilon, lambda_gp: float = 10.0) -> torch.Tensor:
    """``lambda * mean((||grad_xhat D(x_cond, xhat)||_2 - 1)^2)``.

    ``xhat`` interpolates ``x_real`` and ``x_fake``.  The graph is kept so the
    penalty can itself be differentiated w.r.t. the critic parameters.
    """
    # the input gradient is needed even when the caller runs under no_grad
    with torch.enable_grad():
        x_hat = interpolate(x_real, x_fake.detach(), epsilon).detach().requires_grad_(True)
        scores = critic(x_cond, x_hat)
        if scores.requires_grad:
            (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
        else:
            grad = None
        if grad is None:
            grad = torch.zeros_like(x_hat)
        if not torch.isfinite(grad).all():
            raise TrainingDiverged("non-finite critic gradient at the interpolants")
        norms = grad.flatten(1).norm(dim=1)
        return lambda_gp * ((norms - 1.0) ** 2).mean()


def critic_head(loss_mode: str):
    """Map raw critic scores to what the loss sees: identity for wgan_gp, sigmoid for cgan."""
    if loss_mode == "wgan_gp":
        return lambda scores: scores
    if loss_mode == "cgan":
        return torch.sigmoid
    raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {loss_mode!r}")


def _nonempty(scores: torch.Tensor, what: str) -> None:
    if scores.numel() == 0:
        raise ValueError(f"empty batch of {what} scores")


def critic_loss(scores_fake: torch.Tensor, scores_real: torch.Tensor) -> torch.Tensor:
    _nonempty(scores_fake, "fake")
    _nonempty(scores_real, "real")
    if scores_fake.shape != scores_real.shape:
        raise ValueError("fake and real score vectors differ in length")
    return scores_fake.mean() - scores_real.mean()


def generator_loss(scores_fake: torch.Tensor) -> torch.Tensor:
    _nonempty(scores_fake, "fake")
    return -scores_fake.mean()


def cgan_losses(d_real_prob: torch.Tensor, d_fake_prob: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and non-saturating generator losses of a conditional GAN."""
    _nonempty(d_real_prob, "real")
    _nonempty(d_fake_prob, "fake")
    real = d_real_prob.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    fake = d_fake_prob.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    d_loss = -torch.log(real).mean() - torch.log1p(-fake).mean()
    return d_loss, cgan_generator_loss(d_fake_prob)


def cgan_generator_loss(d_fake_prob: torch.Tensor) -> torch.Tensor:
    # non-saturating form: maximize log D(fake) instead of minimizing log(1 - D(fake))
    _nonempty(d_fake_prob, "fake")
    return -torch.log(d_fake_prob.clamp(PROB_CLAMP, 1 - PROB_CLAMP)).mean()


# -- state --------------------------------------------------------------------


@dataclass
class LossRecord:
    step: int
    critic_loss: float
    gp: float
    gen_loss: float


@dataclass
class TrainState:
    config: TrainConfig
    gen_config: GeneratorConfig
    critic_config: CriticConfig
    generator: Generator
    critic: Critic
    gen_opt: Adam
    critic_opt: Adam
    rng: np.random.Generator
    torch_rng: torch.Generator
    step: int = 0
    history: list[LossRecord] = field(default_factory=list)

    @classmethod
    def initial(cls, config: TrainConfig, gen_config: GeneratorConfig,
                critic_config: CriticConfig) -> "TrainState":
        dtype = config.torch_dtype
        generator = Generator(gen_config, seed=config.seed).to(dtype)
        critic = Critic(critic_config, seed=config.seed + 7919).to(dtype)
        hyper = dict(alpha=config.alpha, beta1=config.beta1, beta2=config.beta2)
        torch_rng = torch.Generator().manual_seed(config.seed)
        generator.set_rng(torch_rng)
        critic.set_rng(torch_rng)
        return cls(config, gen_config, critic_config, generator, critic,
                   Adam(generator.named_parameters(), **hyper),
                   Adam(critic.named_parameters(), **hyper),
                   np.random.default_rng(config.seed), torch_rng)


def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# -- the loop -----------------------------------------------------------------


class Trainer:
    """Owns a TrainState and advances it one outer step at a time."""

    def __init__(self, state: TrainState, data: ImageSet):
        self.state = state
        self.data = data
        classes = [c for c in range(data.num_classes) if len(data.class_indices(c)) > 0]
        short = [c for c in classes if len(data.class_indices(c)) < 2]
        if short:
            raise ValueError(f"classes {short} have fewer than 2 training samples")
        if not classes:
            raise ValueError("training set is empty")
        self.classes = classes

    @property
    def config(self) -> TrainConfig:
        return self.state.config

    def _batch(self):
        st = self.state
        c = self.classes[int(st.rng.integers(len(self.classes)))]
        b = sample_conditional_batch(self.data, c, self.config.batch_size, st.rng)
        dtype = self.config.torch_dtype
        x_i = torch.from_numpy(b.x_i).to(dtype)
        x_j = torch.from_numpy(b.x_j).to(dtype)
        labels = torch.full((len(b),), c, dtype=torch.long)
        return x_i, x_j, labels

    def _fake(self, x_j, labels):
        st = self.state
        z = st.generator.sample_latent(len(x_j), st.torch_rng)
        return st.generator(x_j, z, labels if st.gen_config.class_conditioning else None)

    def critic_update(self) -> tuple[float, float]:
        st, cfg = self.state, self.config
        x_i, x_j, labels = self._batch()
        with torch.no_grad():
            x_g = self._fake(x_j, labels)
        eps = torch.rand(len(x_i), generator=st.torch_rng, dtype=cfg.torch_dtype)
        head = critic_head(cfg.loss_mode)
        real = head(st.critic(x_i, x_j))
        fake = head(st.critic(x_i, x_g))
        if cfg.loss_mode == "wgan_gp":
            w_loss = critic_loss(fake, real)
            endpoint = x_i if cfg.interpolate_from == "x_i" else x_j
            gp = gradient_penalty(st.critic, x_i, endpoint, x_g, eps, cfg.lambda_gp)
            total = w_loss + gp
        else:
            w_loss, _ = cgan_losses(real, fake)
            gp = torch.zeros(())
            total = w_loss
        params = list(st.critic_opt.params.items())
        grads = torch.autograd.grad(total, [p for _, p in params], allow_unused=True)
        st.critic_opt.step({n: g for (n, _), g in zip(params, grads) if g is not None})
        return float(w_loss.detach()), float(gp.detach())

    def generator_update(self) -> float:
        st, cfg = self.state, self.config
        x_i, x_j, labels = self._batch()
        x_g = self._fake(x_j, labels)
        fake = critic_head(cfg.loss_mode)(st.critic(x_i, x_g))
        if cfg.loss_mode == "wgan_gp":
            loss = generator_loss(fake)
        else:
            loss = cgan_generator_loss(fake)
        params = list(st.gen_opt.params.items())
        # grads w.r.t. generator parameters only: the critic is left untouched
        grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
        st.gen_opt.step({n: g for (n, _), g in zip(params, grads) if g is not None})
        return float(loss.detach())

    def step(self) -> LossRecord:
        st, cfg = self.state, self.config
        st.generator.train()
        st.critic.train()
        set_renorm_limits(st.generator, *renorm_limits(st.step, cfg.total_steps))
        c_losses, gps = [], []
        for _ in range(cfg.n_critic):
            c, g = self.critic_update()
            c_losses.append(c)
            gps.append(g)
        g_loss = self.generator_update()
        record = LossRecord(st.step, float(np.mean(c_losses)), float(np.mean(gps)), g_loss)
        if not all(math.isfinite(v) for v in (record.critic_loss, record.gp, record.gen_loss)):
            raise TrainingDiverged(f"non-finite loss at step {st.step}: {record}")
        st.history.append(record)
        st.step += 1
        return record

    def run(self, n_steps: int, checkpoint_path: str | Path | None = None,
            checkpoint_every: int | None = None, on_step=None) -> TrainState:
        every = checkpoint_every or self.config.checkpoint_every
        for _ in range(n_steps):
            record = self.step()
            if on_step is not None:
                on_step(record)
            if checkpoint_path is not None and self.state.step % every == 0:
                save_checkpoint(self.state, checkpoint_path)
            if record.step % 100 == 0:
                log.info("step %d critic %.4f gp %.4f gen %.4f", record.step,
                         record.critic_loss, record.gp, record.gen_loss)
        if checkpoint_path is not None:
            save_checkpoint(self.state, checkpoint_path)
        return self.state


def train(config: TrainConfig, data: ImageSet, gen_config: GeneratorConfig | None = None,
          critic_config: CriticConfig | None = None, steps: int | None = None,
          checkpoint_path: str | Path | None = None, resume: TrainState | None = None,
          on_step=None) -> TrainState:
    """Train on ``data`` (the training split) for ``steps`` outer steps.

    Defaults to ``config.total_steps``; with ``resume`` the given state is
    continued instead of a fresh initialization.
    """
    if resume is not None:
        state = resume
    else:
        state = TrainState.initial(config, gen_config or GeneratorConfig(),
                                   critic_config or CriticConfig())
    n = config.total_steps - state.step if steps is None else steps
    return Trainer(state, data).run(max(0, n), checkpoint_path, on_step=on_step)


# -- checkpoints --------------------------------------------------------------

MAGIC = b"GAUCKPT\0"
FORMAT_VERSION = 1
_DTYPE_TAGS = {torch.float32: 1, torch.float64: 2, torch.int64: 3, torch.uint8: 4}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_TEXT_TAG = 5


class CheckpointError(ValueError):
    pass


class CheckpointTruncated(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _pack_entry(name: str, value) -> bytes:
    raw_name = name.encode()
    if isinstance(value, str):
        payload = value.encode()
        header = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", _TEXT_TAG, 0)
    else:
        t = value.detach().contiguous().cpu()
        tag = _DTYPE_TAGS[t.dtype]
        payload = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        header = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", tag, t.dim())
        header += struct.pack(f"<{t.dim()}Q", *t.shape)
    return header + struct.pack("<Q", len(payload)) + payload


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointTruncated(
                f"checkpoint truncated: {what} needs {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} remain"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _state_entries(state: TrainState) -> dict:
    from gau.sections import dump_sections

    entries = {
        "__config__": dump_sections({"training": state.config, "generator": state.gen_config,
                                     "critic": state.critic_config}),
        "state/step": torch.tensor([state.step], dtype=torch.int64),
        "state/history": torch.tensor(
            [[r.step, r.critic_loss, r.gp, r.gen_loss] for r in state.history],
            dtype=torch.float64).reshape(-1, 4),
    }
    for name, t in state.generator.state_dict().items():
        entries[f"generator/{name}"] = t
    for name, t in state.critic.state_dict().items():
        entries[f"critic/{name}"] = t
    for name, t in state.gen_opt.state_tensors().items():
        entries[f"gen_opt/{name}"] = t
    for name, t in state.critic_opt.state_tensors().items():
        entries[f"critic_opt/{name}"] = t
    entries["rng/numpy"] = json.dumps(state.rng.bit_generator.state)
    entries["rng/torch"] = state.torch_rng.get_state()
    return entries


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Write atomically: a crash mid-write leaves the previous checkpoint intact."""
    entries = _state_entries(state)
    blob = bytearray(MAGIC)
    blob += struct.pack("<II", FORMAT_VERSION, len(entries))
    for name, value in entries.items():
        blob += _pack_entry(name, value)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def read_checkpoint_entries(path: str | Path) -> dict:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = r.unpack("<II", "header")
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    if version < 1:
        raise CheckpointVersionError(f"{path}: unknown format version {version}")
    entries = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "entry name length")
        name = r.take(name_len, "entry name").decode()
        tag, rank = r.unpack("<BB", f"{name} header")
        shape = r.unpack(f"<{rank}Q", f"{name} extents") if tag != _TEXT_TAG else ()
        (n_bytes,) = r.unpack("<Q", f"{name} length")
        payload = r.take(n_bytes, f"{name} payload")
        if tag == _TEXT_TAG:
            entries[name] = payload.decode()
            continue
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: entry {name} has unknown dtype tag {tag}")
        dtype = _TAG_DTYPES[tag]
        np_dtype = torch.empty((), dtype=dtype).numpy().dtype.newbyteorder("<")
        expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        if n_bytes != expected:
            raise CheckpointError(f"{path}: entry {name} holds {n_bytes} bytes, shape needs {expected}")
        arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape).astype(np_dtype.newbyteorder("="))
        entries[name] = torch.from_numpy(arr.copy())
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after last entry")
    return entries


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild the full TrainState; nothing is returned unless every entry parsed."""
    from gau.sections import parse_sections

    entries = read_checkpoint_entries(path)
    required = ("__config__", "state/step", "state/history", "rng/numpy", "rng/torch")
    missing = [k for k in required if k not in entries]
    if missing:
        raise CheckpointError(f"{path}: missing entries {missing}")
    cfgs = parse_sections(entries["__config__"], {"training": TrainConfig, "generator": GeneratorConfig,
                                                   "critic": CriticConfig})
    state = TrainState.initial(cfgs["training"], cfgs["generator"], cfgs["critic"])

    def sub(prefix):
        return {k[len(prefix):]: v for k, v in entries.items() if k.startswith(prefix)}

    try:
        state.generator.load_state_dict(sub("generator/"))
        state.critic.load_state_dict(sub("critic/"))
        state.gen_opt.load_state_tensors(sub("gen_opt/"))
        state.critic_opt.load_state_tensors(sub("critic_opt/"))
    except (KeyError, RuntimeError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {exc}") from None
    state.step = int(entries["state/step"][0])
    state.history = [LossRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]))
                     for row in entries["state/history"].tolist()]
    state.rng.bit_generator.state = json.loads(entries["rng/numpy"])
    state.torch_rng.set_state(entries["rng/torch"])
    return state
