"""Conditional dynamics network: a non-causal gated dilated convolution stack.

Each layer forms filter and gate pre-activations from a dilated convolution
of the hidden state, a 1x1 convolution of the (sample-rate) mel condition,
and a learned per-channel vector scaled by the ODE time, then gates them
with tanh * sigmoid. Residual outputs feed the next layer; skip outputs are
summed and mapped back to the state's channels by a small head whose last
convolution starts at zero, so a fresh network is the zero vector field.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import autodiff as ad


@dataclass(frozen=True)
class DynamicsConfig:
    n_layers: int = 4
    kernel_size: int = 3
    residual_channels: int = 128
    skip_channels: int = 128
    dilation_base: int = 3
    in_channels: int = 8
    cond_channels: int = 640

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.n_layers < 0 or self.dilation_base < 1:
            raise ValueError("n_layers >= 0 and dilation_base >= 1 required")

    @property
    def dilations(self) -> list[int]:
        return [self.dilation_base ** i for i in range(self.n_layers)]

    @property
    def receptive_field(self) -> int:
        """Distance between the farthest left and right input positions that
        influence one output: (K - 1) * sum(base**i)."""
        return (self.kernel_size - 1) * sum(self.dilations)


class GatedLayer(nn.Module):
    def __init__(self, cfg: DynamicsConfig, dilation: int, last: bool):
        super().__init__()
        r = cfg.residual_channels
        self.dilation = dilation
        # filter and gate halves stacked along the output axis: W_f|W_g, V_f|V_g, U_f|U_g
        self.in_conv = ad.Conv1d(r, 2 * r, cfg.kernel_size, dilation=dilation)
        self.cond_conv = ad.Conv1d(cfg.cond_channels, 2 * r, 1, bias=False)
        self.time_proj = nn.Parameter(torch.empty(2 * r).uniform_(-1.0, 1.0) / r ** 0.5)
        self.res_conv = None if last else ad.Conv1d(r, r, 1)
        self.skip_conv = ad.Conv1d(r, cfg.skip_channels, 1)

    def preactivations(self, h: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        a = self.in_conv(h) + self.cond_conv(c)
        return ad.add(a, self.time_proj * t)

    def forward(self, h, t, c):
        a = self.preactivations(h, t, c)
        a_f, a_g = a.chunk(2, dim=1)
        out = ad.gate(a_f, a_g)
        skip = self.skip_conv(out)
        if self.res_conv is not None:
            h = h + self.res_conv(out)
        return h, skip


class GatedDilatedDynamics(nn.Module):
    """dz/dt = f(z, t, c) for z of shape [B, in_channels, L]."""

    def __init__(self, cfg: DynamicsConfig):
        super().__init__()
        self.cfg = cfg
        self.start = ad.Conv1d(cfg.in_channels, cfg.residual_channels, 1)
        self.layers = nn.ModuleList(
            GatedLayer(cfg, d, last=(i == cfg.n_layers - 1)) for i, d in enumerate(cfg.dilations)
        )
        head_in = cfg.skip_channels if cfg.n_layers else cfg.residual_channels
        self.end_hidden = ad.Conv1d(head_in, cfg.skip_channels, 1)
        self.end_out = ad.Conv1d(cfg.skip_channels, cfg.in_channels, 1).zero_()

    def forward(self, z: torch.Tensor, t, c: torch.Tensor) -> torch.Tensor:
        if z.dim() != 3 or c.dim() != 3:
            raise ad.ShapeError("z and c must be [B, C, L]")
        if z.shape[2] != c.shape[2]:
            raise ad.ShapeError(f"length axis (2): z has {z.shape[2]}, c has {c.shape[2]}")
        if z.shape[0] != c.shape[0]:
            raise ad.ShapeError(f"batch axis (0): z has {z.shape[0]}, c has {c.shape[0]}")
        t = torch.as_tensor(t, dtype=z.dtype)
        h = self.start(z)
        if not self.layers:
            skips = h
        else:
            skips = 0
            for layer in self.layers:
                h, s = layer(h, t, c)
                skips = skips + s
        return self.end_out(torch.relu(self.end_hidden(skips)))

    def layer0_preactivation(self, z, t, c) -> torch.Tensor:
        """Filter half of the first layer's pre-activation (a probe for tests)."""
        t = torch.as_tensor(t, dtype=z.dtype)
        a = self.layers[0].preactivations(self.start(z), t, c)
        return a.chunk(2, dim=1)[0]


def measured_receptive_field(net: GatedDilatedDynamics, length: int | None = None,
                             t: float = 0.5, seed: int = 0) -> tuple[int, int]:
    """Impulse-perturbation probe of a network's receptive field.

    Perturbs the centre input position and returns ``(extent, n_affected)``:
    the distance between the outermost output positions that change, and the
    number of positions that change. The network's output head must be non-zero.
    """
    cfg = net.cfg
    span = cfg.receptive_field
    length = length or 2 * span + 33
    centre = length // 2
    param = next(net.parameters())
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(1, cfg.in_channels, length, generator=g, dtype=param.dtype)
    c = torch.randn(1, cfg.cond_channels, length, generator=g, dtype=param.dtype)
    bumped = z.clone()
    bumped[:, :, centre] += 1.0
    with torch.no_grad():
        diff = (net(bumped, t, c) - net(z, t, c)).abs().amax(dim=(0, 1))
    hit = torch.nonzero(diff > 1e-12 * max(float(diff.max()), 1e-300)).flatten()
    if hit.numel() == 0:
        return 0, 0
    return int(hit.max() - hit.min()), int(hit.numel())
