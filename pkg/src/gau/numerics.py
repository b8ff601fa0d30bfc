"""Differentiable layer primitives and the Adam optimizer.

Every network in the package is composed from these ops.  Tensors follow
torch's NCHW layout inside the networks; autograd supplies the backward
passes and :func:`grad_check` verifies them against central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-5
ADAM_EPS = 1e-8
LEAKY_SLOPE = 0.01


def leaky_relu(x: torch.Tensor) -> torch.Tensor:
    # f(x) = x for x > 0, 0.01 x otherwise; torch's kernel uses the same branch at 0
    return F.leaky_relu(x, LEAKY_SLOPE)


def _check_conv_shapes(x: torch.Tensor, weight: torch.Tensor, in_dim: int) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected NCHW input, got shape {tuple(x.shape)}")
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"expected square 4-d kernel, got shape {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[in_dim]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]} channels, kernel expects {weight.shape[in_dim]}"
        )


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1) -> torch.Tensor:
    """Zero same-padded convolution.

    ``weight`` is ``(out, in, k, k)`` with ``k`` in {1, 3}; the output spatial
    extent is ``ceil(n / stride)``.
    """
    _check_conv_shapes(x, weight, in_dim=1)
    k = weight.shape[-1]
    if k not in (1, 3):
        raise ValueError(f"kernel size must be 1 or 3, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    return F.conv2d(x, weight, bias, stride=stride, padding=k // 2)


def deconv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
             stride: int = 2) -> torch.Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` with the same kernel.

    ``stride`` is the upsampling factor: 2 doubles the spatial extent (a
    fractional stride of one half), 1 keeps it.  ``weight`` has the layout of
    the convolution it transposes, ``(in, out, k, k)`` from this op's view.
    """
    _check_conv_shapes(x, weight, in_dim=0)
    k = weight.shape[-1]
    if k not in (1, 3):
        raise ValueError(f"kernel size must be 1 or 3, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    # output_padding restores the extent lost by ceil() in the forward conv
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=k // 2,
                              output_padding=stride - 1)


def batch_renorm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                 running_mean: torch.Tensor, running_var: torch.Tensor,
                 training: bool, r_max: float = 1.0, d_max: float = 0.0,
                 momentum: float = 0.01, eps: float = NORM_EPS):
    """Batch renormalization over every axis except channels.

    Returns ``(y, new_running_mean, new_running_var)``; the caller owns the
    running statistics.  In infer mode the running statistics pass through
    unchanged.  The correction factors ``r`` and ``d`` carry no gradient.
    """
    if x.dim() < 2:
        raise ValueError("batch_renorm needs a batch and a channel axis")
    running_std = torch.sqrt(running_var + eps)
    if not training:
        y = F.batch_norm(x, running_mean, running_var, weight, bias, False, 0.0, eps)
        return y, running_mean, running_var

    if x.shape[0] < 2:
        raise ValueError("batch_renorm in train mode needs a batch of at least 2")
    dims = [0] + list(range(2, x.dim()))
    with torch.no_grad():
        var, mean = torch.var_mean(x, dim=dims, unbiased=False)
        std = torch.sqrt(var + eps)
        r = torch.clamp(std / running_std, 1.0 / r_max, r_max)
        d = torch.clamp((mean - running_mean) / running_std, -d_max, d_max)
        new_mean = running_mean + momentum * (mean - running_mean)
        new_var = running_var + momentum * (var - running_var)
    # gamma * (x_hat * r + d) + beta, with r and d folded into the affine
    y = F.batch_norm(x, None, None, weight * r, weight * d + bias, True, 0.0, eps)
    return y, new_mean, new_var


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
               eps: float = NORM_EPS) -> torch.Tensor:
    """Per-sample normalization over all non-batch axes, then a per-channel affine."""
    if x.dim() == 2:
        return F.layer_norm(x, x.shape[1:], weight, bias, eps)
    # a single group spans every non-batch axis and keeps the per-channel affine
    return F.group_norm(x, 1, weight, bias, eps)


def dropout(x: torch.Tensor, rate: float, training: bool,
            generator: torch.Generator | None = None) -> torch.Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep / (1.0 - rate)


def he_normal_(weight: torch.Tensor, generator: torch.Generator | None = None,
               fan_in: int | None = None) -> torch.Tensor:
    """Fan-in scaled Gaussian init, tuned for the leaky-ReLU gain."""
    if fan_in is None:
        fan_in = weight[0].numel()
    gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))
    with torch.no_grad():
        weight.normal_(0.0, gain / math.sqrt(fan_in), generator=generator)
    return weight


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Re-draw every conv/deconv/linear weight from ``generator``; zero the biases."""
    for m in module.modules():
        if isinstance(m, Conv2d):
            he_normal_(m.weight, generator)
        elif isinstance(m, Deconv2d):
            he_normal_(m.weight, generator, fan_in=m.fan_in)
        elif isinstance(m, nn.Linear):
            he_normal_(m.weight, generator)
        else:
            continue
        if m.bias is not None:
            with torch.no_grad():
                m.bias.zero_()


def renorm_limits(step: int, total_steps: int, ramp_fraction: float = 0.25) -> tuple[float, float]:
    """Correction-factor limits at ``step``: r_max ramps 1 -> 3, d_max 0 -> 5."""
    ramp = max(1.0, ramp_fraction * total_steps)
    frac = min(1.0, step / ramp)
    return 1.0 + 2.0 * frac, 5.0 * frac


# -- modules ------------------------------------------------------------------


class Conv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 bias: bool = True):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        he_normal_(self.weight)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride)


class Deconv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 2,
                 bias: bool = True):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(in_ch, out_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        # fan-in of a transposed conv counts the taps landing on one output pixel
        self.fan_in = max(1, in_ch * kernel * kernel // (stride * stride))
        he_normal_(self.weight, fan_in=self.fan_in)

    def forward(self, x):
        return deconv2d(x, self.weight, self.bias, self.stride)


class BatchRenorm2d(nn.Module):
    """Batch renormalization with running statistics stored as buffers.

    ``r_max`` / ``d_max`` are plain attributes so a trainer can ramp them.
    """

    def __init__(self, channels: int, momentum: float = 0.01, eps: float = NORM_EPS):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.r_max = 1.0
        self.d_max = 0.0
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        y, mean, var = batch_renorm(x, self.weight, self.bias, self.running_mean,
                                    self.running_var, self.training, self.r_max,
                                    self.d_max, self.momentum, self.eps)
        if self.training:
            self.running_mean.copy_(mean)
            self.running_var.copy_(var)
        return y


class LayerNorm(nn.Module):
    def __init__(self, channels: int, eps: float = NORM_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class LeakyReLU(nn.Module):
    def forward(self, x):
        return leaky_relu(x)


class Dropout(nn.Module):
    """Dropout drawing its mask from an explicit generator.

    The owning network hands every Dropout the same ``torch.Generator`` so
    that a run is reproducible from its seed alone.
    """

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.generator: torch.Generator | None = None

    def forward(self, x):
        return dropout(x, self.rate, self.training, self.generator)


def attach_generator(module: nn.Module, generator: torch.Generator | None) -> None:
    for m in module.modules():
        if isinstance(m, Dropout):
            m.generator = generator


def set_renorm_limits(module: nn.Module, r_max: float, d_max: float) -> None:
    for m in module.modules():
        if isinstance(m, BatchRenorm2d):
            m.r_max = r_max
            m.d_max = d_max


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: torch.Tensor
    second_moment: torch.Tensor
    step_count: int = 0
    alpha: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    epsilon_hat: float = ADAM_EPS

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")

    @classmethod
    def zeros_like(cls, param: torch.Tensor, **hyper) -> "AdamState":
        return cls(torch.zeros_like(param), torch.zeros_like(param), **hyper)


def adam_step(param: torch.Tensor, grad: torch.Tensor,
              state: AdamState) -> tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam update.  Pure: returns new tensors and state."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != parameter shape {tuple(param.shape)}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - state.alpha * m_hat / (torch.sqrt(v_hat) + state.epsilon_hat)
    new_state = AdamState(m, v, t, state.alpha, state.beta1, state.beta2, state.epsilon_hat)
    return new_param, new_state


class Adam:
    """Adam over a fixed, named parameter set, updated in place."""

    def __init__(self, named_params: Iterable[tuple[str, nn.Parameter]], alpha: float = 1e-4,
                 beta1: float = 0.0, beta2: float = 0.9, epsilon_hat: float = ADAM_EPS):
        self.params = dict(named_params)
        self.hyper = dict(alpha=alpha, beta1=beta1, beta2=beta2, epsilon_hat=epsilon_hat)
        self.states = {name: AdamState.zeros_like(p.detach(), **self.hyper)
                       for name, p in self.params.items()}

    def step(self, grads: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name, p in self.params.items():
                g = grads.get(name)
                if g is None:
                    g = torch.zeros_like(p)
                new_p, self.states[name] = adam_step(p.detach(), g, self.states[name])
                p.copy_(new_p)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, st in self.states.items():
            out[f"{name}.m"] = st.first_moment
            out[f"{name}.v"] = st.second_moment
            out[f"{name}.t"] = torch.tensor([st.step_count], dtype=torch.int64)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for name, p in self.params.items():
            for key in (f"{name}.m", f"{name}.v"):
                if tuple(tensors[key].shape) != tuple(p.shape):
                    raise ValueError(f"{key}: shape {tuple(tensors[key].shape)} != {tuple(p.shape)}")
            self.states[name] = AdamState(
                tensors[f"{name}.m"].to(p.dtype).clone(),
                tensors[f"{name}.v"].to(p.dtype).clone(),
                int(tensors[f"{name}.t"][0]),
                **self.hyper,
            )


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst_index: tuple = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> tuple[float, int]:
    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), 1e-12)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(numeric, 1e-3 * scale))
    rel = (analytic - numeric).abs() / denom
    idx = int(rel.argmax())
    return float(rel.reshape(-1)[idx]), idx


def grad_check(op: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
               tolerance: float = 1e-4, step: float = 1e-5, seed: int = 0,
               max_entries: int | None = None) -> GradCheckReport:
    """Compare autograd against central differences for ``sum(w * op(x))``.

    ``w`` is a fixed random projection so the whole Jacobian is exercised.
    Relative errors are taken per entry, with a floor of 1e-3 of the
    gradient's scale in the denominator.  Never raises on a violation; read
    ``report.passed``.  ``max_entries`` restricts the finite differences to a
    random subset of input entries.
    """
    x = x.detach().clone()
    # offset keeps the projection uncorrelated with inputs drawn from small seeds
    gen = torch.Generator().manual_seed(seed + 0x5EED)
    with torch.no_grad():
        probe_out = op(x)
    w = torch.randn(probe_out.shape, generator=gen, dtype=x.dtype)

    def loss(inp):
        return (op(inp) * w).sum()

    xa = x.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(loss(xa), xa)

    flat = x.reshape(-1)
    n = flat.numel()
    if max_entries is not None and max_entries < n:
        indices = torch.randperm(n, generator=gen)[:max_entries].tolist()
    else:
        indices = range(n)
    numeric = torch.empty(len(indices), dtype=x.dtype)
    with torch.no_grad():
        for out_i, i in enumerate(indices):
            orig = float(flat[i])
            flat[i] = orig + step
            up = float(loss(x))
            flat[i] = orig - step
            down = float(loss(x))
            flat[i] = orig
            numeric[out_i] = (up - down) / (2 * step)
    analytic_sel = analytic.reshape(-1)[list(indices)]
    err, worst = _rel_error(analytic_sel, numeric)
    return GradCheckReport(err, tolerance, len(numeric), (list(indices)[worst],))


def param_grad_check(loss_fn: Callable[[], torch.Tensor], module: nn.Module,
                     tolerance: float = 1e-3, step: float = 1e-5, entries_per_tensor: int = 2,
                     seed: int = 0) -> GradCheckReport:
    """Finite-difference check of a scalar loss against every parameter tensor.

    For each tensor, a random direction over the whole tensor plus a few
    individual entries are probed.  ``loss_fn`` must be deterministic.
    """
    gen = torch.Generator().manual_seed(seed)
    params = [(n, p) for n, p in module.named_parameters()]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    analytic, numeric = [], []

    def probe(p, direction):
        # only the in-place nudges skip autograd; the loss may itself need gradients
        with torch.no_grad():
            p.add_(step * direction)
        up = float(loss_fn().detach())
        with torch.no_grad():
            p.sub_(2 * step * direction)
        down = float(loss_fn().detach())
        with torch.no_grad():
            p.add_(step * direction)
        return (up - down) / (2 * step)

    for (name, p), g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        direction = torch.randn(p.shape, generator=gen, dtype=p.dtype)
        direction /= direction.norm()
        analytic.append(float((g * direction).sum()))
        numeric.append(probe(p, direction))
        flat_idx = torch.randperm(p.numel(), generator=gen)[:entries_per_tensor].tolist()
        for i in flat_idx:
            e = torch.zeros(p.numel(), dtype=p.dtype)
            e[i] = 1.0
            e = e.reshape(p.shape)
            analytic.append(float(g.reshape(-1)[i]))
            numeric.append(probe(p, e))
    a = torch.tensor(analytic, dtype=torch.float64)
    n = torch.tensor(numeric, dtype=torch.float64)
    err, worst = _rel_error(a, n)
    return GradCheckReport(err, tolerance, len(n), (worst,))
