"""Flow layers and the multi-scale conditional CNF vocoder.

Sign convention: ``delta_logp`` accumulates ``log p(output) - log p(input)``
of every layer in the inference direction (waveform -> noise), so

    log p(x | c) = log p_base(latents) - delta_logp.

Inference integrates each CNF layer from t1 down to t0; sampling integrates
from t0 up to t1.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import torch
from torch import nn

from . import autodiff as ad
from .dynamics import DynamicsConfig, GatedDilatedDynamics
from .odeint import OdeProblem, SolverConfig, solve

LOG_2PI = math.log(2 * math.pi)
STD_FLOOR = 1e-6
LOGSTD_CLAMP = 7.0


class NormKind(str, enum.Enum):
    ACTNORM = "actnorm"
    MBN = "mbn"
    NONE = "none"


class NoiseDist(str, enum.Enum):
    RADEMACHER = "rademacher"
    GAUSSIAN = "gaussian"


class TraceMode(str, enum.Enum):
    HUTCHINSON = "hutchinson"
    EXACT = "exact"


class FlowState(NamedTuple):
    z: torch.Tensor
    delta_logp: torch.Tensor


class NotInitializedError(RuntimeError):
    pass


# ---------------------------------------------------------------- squeeze

def squeeze(x: torch.Tensor, q: int) -> torch.Tensor:
    """[B, C, L] -> [B, q*C, L/q] with out[b, c*q + r, l] = x[b, c, l*q + r]."""
    b, c, length = x.shape
    if length % q:
        raise ad.ShapeError(f"length axis (2): {length} is not divisible by squeeze factor {q}")
    return x.reshape(b, c, length // q, q).permute(0, 1, 3, 2).reshape(b, c * q, length // q)


def unsqueeze(x: torch.Tensor, q: int) -> torch.Tensor:
    b, cq, length = x.shape
    if cq % q:
        raise ad.ShapeError(f"channel axis (1): {cq} is not divisible by squeeze factor {q}")
    return x.reshape(b, cq // q, q, length).permute(0, 1, 3, 2).reshape(b, cq // q, length * q)


# ---------------------------------------------------------------- norm layers

class ActNorm(nn.Module):
    """Per-channel affine map with data-dependent initialisation."""

    def __init__(self, channels: int):
        super().__init__()
        self.s = nn.Parameter(torch.ones(channels))
        self.b = nn.Parameter(torch.zeros(channels))
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def initialize(self, z: torch.Tensor) -> None:
        if bool(self.initialized):
            raise RuntimeError("actnorm already initialized")
        mean, std = ad.batch_stats(z)
        std = std.clamp_min(STD_FLOOR)
        self.s.copy_(1.0 / std)
        self.b.copy_(-mean / std)
        self.initialized.fill_(True)

    def _check(self):
        if not bool(self.initialized):
            raise NotInitializedError("actnorm used before data-dependent initialization")

    def logdet(self, length: int) -> torch.Tensor:
        return length * torch.log(self.s.abs()).sum()

    def forward(self, state: FlowState) -> FlowState:
        self._check()
        z = ad.scale_and_shift(state.z, self.s, self.b)
        return FlowState(z, state.delta_logp - self.logdet(z.shape[2]))

    def inverse(self, state: FlowState) -> FlowState:
        self._check()
        z = ad.scale_and_shift(state.z - self.b.view(1, -1, 1), 1.0 / self.s, 0.0)
        return FlowState(z, state.delta_logp + self.logdet(z.shape[2]))


class MovingBatchNorm(nn.Module):
    """Normalisation by running statistics, in training and evaluation alike."""

    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum
        self.s = nn.Parameter(torch.ones(channels))
        self.b = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_std", torch.ones(channels))
        self.register_buffer("populated", torch.tensor(False))

    @torch.no_grad()
    def update(self, z: torch.Tensor) -> None:
        mean, std = ad.batch_stats(z)
        if not bool(self.populated):
            self.running_mean.copy_(mean)
            self.running_std.copy_(std)
            self.populated.fill_(True)
        else:
            m = self.momentum
            self.running_mean.mul_(1 - m).add_(m * mean)
            self.running_std.mul_(1 - m).add_(m * std)
        self.running_std.clamp_(min=STD_FLOOR)

    def logdet(self, length: int) -> torch.Tensor:
        sigma = self.running_std.clamp_min(STD_FLOOR)
        return length * (torch.log(self.s.abs()) - torch.log(sigma)).sum()

    def forward(self, state: FlowState) -> FlowState:
        if self.training:
            self.update(state.z.detach())
        sigma = self.running_std.clamp_min(STD_FLOOR)
        z = ad.scale_and_shift(state.z - self.running_mean.view(1, -1, 1), self.s / sigma, self.b)
        return FlowState(z, state.delta_logp - self.logdet(z.shape[2]))

    def inverse(self, state: FlowState) -> FlowState:
        sigma = self.running_std.clamp_min(STD_FLOOR)
        z = ad.scale_and_shift(state.z - self.b.view(1, -1, 1), sigma / self.s, self.running_mean)
        return FlowState(z, state.delta_logp + self.logdet(z.shape[2]))


class IdentityNorm(nn.Module):
    def forward(self, state: FlowState) -> FlowState:
        return state

    def inverse(self, state: FlowState) -> FlowState:
        return state


def make_norm(kind: NormKind, channels: int, momentum: float = 0.1) -> nn.Module:
    kind = NormKind(kind)
    if kind is NormKind.ACTNORM:
        return ActNorm(channels)
    if kind is NormKind.MBN:
        return MovingBatchNorm(channels, momentum)
    return IdentityNorm()


# ---------------------------------------------------------------- trace estimation

def draw_probe(shape, dist: NoiseDist, generator: torch.Generator | None,
               dtype=torch.float64) -> torch.Tensor:
    """Noise with zero mean and identity covariance."""
    dist = NoiseDist(dist)
    if dist is NoiseDist.RADEMACHER:
        bits = torch.randint(0, 2, shape, generator=generator)
        return (2 * bits - 1).to(dtype)
    return torch.randn(shape, generator=generator, dtype=dtype)


def hutchinson_trace(dz: torch.Tensor, z: torch.Tensor, probes: torch.Tensor,
                     create_graph: bool) -> torch.Tensor:
    """Per-sample estimate of tr(d dz / d z), averaged over ``probes[k]``."""
    total = 0
    for eps in probes:
        g = ad.vjp(dz, z, eps, create_graph=create_graph)
        total = total + (g * eps).flatten(1).sum(1)
    return total / probes.shape[0]


def exact_trace(dz: torch.Tensor, z: torch.Tensor, create_graph: bool) -> torch.Tensor:
    """Per-sample tr(d dz / d z) from one VJP per basis vector."""
    b = z.shape[0]
    d = z[0].numel()
    flat_dz = dz.reshape(b, d)
    total = 0
    for i in range(d):
        e = torch.zeros_like(flat_dz)
        e[:, i] = 1.0
        g = ad.vjp(dz, z, e.view_as(dz), create_graph=create_graph)
        total = total + g.reshape(b, d)[:, i]
    return total


@dataclass
class TraceSettings:
    mode: TraceMode = TraceMode.HUTCHINSON
    probes: int = 1
    noise: NoiseDist = NoiseDist.RADEMACHER
    exact_cap: int = 1024
    generator: torch.Generator | None = None


class CNFLayer(nn.Module):
    """One continuous-time flow step driven by a conditional dynamics net."""

    def __init__(self, dyn_cfg: DynamicsConfig, t0: float = 0.0, t1: float = 1.0):
        super().__init__()
        self.net = GatedDilatedDynamics(dyn_cfg)
        self.t0 = t0
        self.t1 = t1
        self.last_nfe = 0

    def infer(self, state: FlowState, c: torch.Tensor, solver: SolverConfig,
              trace: TraceSettings | None = None) -> FlowState:
        trace = trace or TraceSettings()
        z_in = state.z
        shape = z_in.shape
        b, n = shape[0], z_in[0].numel()
        mode = TraceMode(trace.mode)
        if mode is TraceMode.EXACT and n > trace.exact_cap:
            raise ValueError(f"exact trace needs D <= {trace.exact_cap}, got D={n}")
        # One probe set per solve, fixed across all internal steps.
        probes = None
        if mode is TraceMode.HUTCHINSON:
            probes = draw_probe((trace.probes, *shape), trace.noise, trace.generator, z_in.dtype)
        create_graph = torch.is_grad_enabled()

        def augmented(y: torch.Tensor, t: float) -> torch.Tensor:
            z = y[: b * n].view(shape)
            with torch.enable_grad():
                if not z.requires_grad:
                    z = z.detach().requires_grad_(True)
                dz = self.net(z, t, c)
                if mode is TraceMode.EXACT:
                    tr = exact_trace(dz, z, create_graph)
                else:
                    tr = hutchinson_trace(dz, z, probes, create_graph)
            if not create_graph:
                dz, tr = dz.detach(), tr.detach()
            return torch.cat([dz.reshape(-1), -tr])

        y0 = torch.cat([z_in.reshape(-1), torch.zeros(b, dtype=z_in.dtype)])
        res = solve(OdeProblem(augmented, self.t1, self.t0, y0), solver)
        self.last_nfe = res.nfe
        z0 = res.y_final[: b * n].view(shape)
        return FlowState(z0, state.delta_logp + res.y_final[b * n:])

    def sample(self, z: torch.Tensor, c: torch.Tensor, solver: SolverConfig) -> torch.Tensor:
        shape = z.shape

        def dynamics(y, t):
            return self.net(y.view(shape), t, c).reshape(-1)

        res = solve(OdeProblem(dynamics, self.t0, self.t1, z.reshape(-1)), solver)
        self.last_nfe = res.nfe
        return res.y_final.view(shape)


# ---------------------------------------------------------------- conditioning and factor-out

class Upsampler(nn.Module):
    """Frame-rate mel to sample rate with one transposed convolution."""

    def __init__(self, n_mels: int, hop: int):
        super().__init__()
        kernel = 2 * hop if hop > 1 else 1
        self.hop = hop
        self.conv = nn.ConvTranspose1d(n_mels, n_mels, kernel, stride=hop)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return ad.transposed_conv1d(mel, self.conv.weight, self.conv.bias, self.hop)


class DensityEstimator(nn.Module):
    """Two convolutions mapping the kept channels to (mean, log-std) of the
    factored-out channels. The output convolution starts at zero, so the
    initial prior on factored channels is the standard normal."""

    def __init__(self, kept: int, factored: int, hidden: int = 64, kernel: int = 3):
        super().__init__()
        self.hidden = ad.Conv1d(kept, hidden, kernel)
        self.out = ad.Conv1d(hidden, 2 * factored, kernel).zero_()

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, log_std = self.out(torch.relu(self.hidden(h))).chunk(2, dim=1)
        return mean, log_std.clamp(-LOGSTD_CLAMP, LOGSTD_CLAMP)


def gaussian_logp(x: torch.Tensor, mean=None, log_std=None) -> torch.Tensor:
    """Per-sample sum of elementwise Gaussian log densities."""
    if mean is None:
        lp = -0.5 * (x ** 2 + LOG_2PI)
    else:
        eps = (x - mean) * torch.exp(-log_std)
        lp = -0.5 * (eps ** 2 + LOG_2PI) - log_std
    return lp.flatten(1).sum(1)


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 4
    q: int = 2
    q_init: int = 4
    factor_out_after_block: int = 2
    norm_kind: NormKind = NormKind.ACTNORM
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    n_mels: int = 80
    hop: int = 256
    de_hidden: int = 64
    mbn_momentum: float = 0.1
    hutchinson_probes: int = 1
    noise_dist: NoiseDist = NoiseDist.RADEMACHER
    train_tolerance: float = 1e-5
    t0: float = 0.0
    t1: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "norm_kind", NormKind(self.norm_kind))
        object.__setattr__(self, "noise_dist", NoiseDist(self.noise_dist))
        if not 1 <= self.factor_out_after_block < self.n_blocks:
            raise ValueError("need 1 <= factor_out_after_block < n_blocks")
        if self.t0 == self.t1:
            raise ValueError("t0 and t1 must differ")

    @property
    def length_multiple(self) -> int:
        return self.q_init * self.q ** self.n_blocks

    def block_shapes(self) -> list[tuple[int, int]]:
        """(state channels, condition channels) inside each block."""
        c, cc = self.q_init, self.n_mels * self.q_init
        out = []
        for i in range(self.n_blocks):
            c, cc = c * self.q, cc * self.q
            out.append((c, cc))
            if i + 1 == self.factor_out_after_block:
                c //= 2
        return out


@dataclass
class InferResult:
    latents: list[torch.Tensor]  # standardised factored-out noise, then the final state
    log_likelihood: torch.Tensor  # [B], nats per waveform
    nfe: int
    length: int

    @property
    def cll(self) -> torch.Tensor:
        """Conditional log-likelihood in nats per waveform sample."""
        return self.log_likelihood / self.length


@dataclass
class SampleResult:
    audio: torch.Tensor
    nfe: int


class CNFVocoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.upsampler = Upsampler(cfg.n_mels, cfg.hop)
        self.norms = nn.ModuleList()
        self.cnfs = nn.ModuleList()
        for c, cc in cfg.block_shapes():
            self.norms.append(make_norm(cfg.norm_kind, c, cfg.mbn_momentum))
            dyn = replace(cfg.dynamics, in_channels=c, cond_channels=cc)
            self.cnfs.append(CNFLayer(dyn, cfg.t0, cfg.t1))
        c_fact = cfg.block_shapes()[cfg.factor_out_after_block - 1][0]
        self.de = DensityEstimator(c_fact // 2, c_fact - c_fact // 2, cfg.de_hidden)

    # conditioning pyramid shared by inference and sampling
    def conditions(self, mel: torch.Tensor, length: int) -> list[torch.Tensor]:
        c = self.upsampler(mel)
        if c.shape[2] != length:
            raise ad.ShapeError(f"length axis (2): upsampled mel has {c.shape[2]} samples, waveform {length}")
        c = squeeze(c, self.cfg.q_init)
        out = []
        for _ in range(self.cfg.n_blocks):
            c = squeeze(c, self.cfg.q)
            out.append(c)
        return out

    def check_length(self, length: int) -> None:
        m = self.cfg.length_multiple
        if length % m:
            raise ad.ShapeError(f"waveform length {length} must be a multiple of {m}")

    def default_solver(self) -> SolverConfig:
        return SolverConfig.adaptive(self.cfg.train_tolerance)

    def default_trace(self, generator=None) -> TraceSettings:
        return TraceSettings(TraceMode.HUTCHINSON, self.cfg.hutchinson_probes,
                             self.cfg.noise_dist, generator=generator)

    def infer(self, x: torch.Tensor, mel: torch.Tensor, solver: SolverConfig | None = None,
              trace: TraceSettings | None = None, init_norms: bool = False) -> InferResult:
        """Map waveforms [B, 1, L] to latents and score log p(x | mel).

        ``init_norms`` runs data-dependent initialisation of every actnorm
        on this batch as it passes through.
        """
        cfg = self.cfg
        solver = solver or self.default_solver()
        trace = trace or self.default_trace()
        length = x.shape[2]
        self.check_length(length)
        conds = self.conditions(mel, length)
        state = FlowState(squeeze(x, cfg.q_init), x.new_zeros(x.shape[0]))
        latents = []
        logp = x.new_zeros(x.shape[0])
        nfe = 0
        for i in range(cfg.n_blocks):
            state = FlowState(squeeze(state.z, cfg.q), state.delta_logp)
            norm = self.norms[i]
            if init_norms and isinstance(norm, ActNorm) and not bool(norm.initialized):
                norm.initialize(state.z)
            state = norm(state)
            state = self.cnfs[i].infer(state, conds[i], solver, trace)
            nfe += self.cnfs[i].last_nfe
            if i + 1 == cfg.factor_out_after_block:
                kept, fact = _split(state.z)
                mean, log_std = self.de(kept)
                logp = logp + gaussian_logp(fact, mean, log_std)
                latents.append((fact - mean) * torch.exp(-log_std))
                state = FlowState(kept, state.delta_logp)
        latents.append(state.z)
        logp = logp + gaussian_logp(state.z) - state.delta_logp
        return InferResult(latents, logp, nfe, length)

    def latent_shapes(self, batch: int, length: int) -> list[tuple[int, ...]]:
        cfg = self.cfg
        shapes = cfg.block_shapes()
        fc = shapes[cfg.factor_out_after_block - 1][0]
        l_fact = length // (cfg.q_init * cfg.q ** cfg.factor_out_after_block)
        return [(batch, fc - fc // 2, l_fact), (batch, shapes[-1][0], length // cfg.length_multiple)]

    def sample(self, mel: torch.Tensor, solver: SolverConfig | None = None,
               latents: list[torch.Tensor] | None = None, temperature: float = 1.0,
               generator: torch.Generator | None = None, clamp: bool = True) -> SampleResult:
        """Draw waveforms for ``mel`` (or decode given standardised ``latents``)."""
        cfg = self.cfg
        solver = solver or self.default_solver()
        length = mel.shape[2] * cfg.hop
        self.check_length(length)
        dtype = self.upsampler.conv.weight.dtype
        if latents is None:
            latents = [temperature * torch.randn(s, generator=generator, dtype=dtype)
                       for s in self.latent_shapes(mel.shape[0], length)]
        conds = self.conditions(mel, length)
        z = latents[-1]
        nfe = 0
        dummy = z.new_zeros(z.shape[0])
        for i in reversed(range(cfg.n_blocks)):
            if i + 1 == cfg.factor_out_after_block:
                mean, log_std = self.de(z)
                z = torch.cat([z, mean + torch.exp(log_std) * latents[0]], dim=1)
            z = self.cnfs[i].sample(z, conds[i], solver)
            nfe += self.cnfs[i].last_nfe
            z = self.norms[i].inverse(FlowState(z, dummy)).z
            z = unsqueeze(z, cfg.q)
        x = unsqueeze(z, cfg.q_init)
        if clamp:
            x = x.clamp(-1.0, 1.0)
        return SampleResult(x, nfe)

    def nll_loss(self, x, mel, solver=None, trace=None) -> tuple[torch.Tensor, InferResult]:
        """Negative mean CLL in nats per sample; the only training objective."""
        res = self.infer(x, mel, solver, trace)
        return -res.cll.mean(), res

    def initialize(self, x: torch.Tensor, mel: torch.Tensor) -> None:
        """Data-dependent initialisation of actnorm layers from a first batch."""
        with torch.no_grad():
            self.infer(x, mel, init_norms=True)

    def param_breakdown(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            parts = name.split(".")
            key = ".".join(parts[:2]) if parts[0] in ("cnfs", "norms") else parts[0]
            groups[key] = groups.get(key, 0) + p.numel()
        return groups


def _split(z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    half = z.shape[1] // 2
    return z[:, :half], z[:, half:]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
