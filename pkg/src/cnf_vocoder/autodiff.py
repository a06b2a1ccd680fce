"""Differentiable tensor operators used by the dynamics network and the loss.

Reverse-mode differentiation is delegated to torch autograd; what lives here
is the operator set with the shape contracts the flow relies on (odd
kernels with same-length padding, exact-length transposed upsampling,
per-channel broadcasting only) and the vector-Jacobian product used by
the trace estimator.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _expect_rank(x: torch.Tensor, rank: int, name: str) -> None:
    if x.dim() != rank:
        raise ShapeError(f"{name}: expected rank {rank}, got shape {tuple(x.shape)}")


def conv1d(input: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           dilation: int = 1) -> torch.Tensor:
    """Non-causal dilated convolution whose output length equals the input length."""
    _expect_rank(input, 3, "input")
    _expect_rank(weight, 3, "weight")
    c_out, c_in, k = weight.shape
    if input.shape[1] != c_in:
        raise ShapeError(f"channel axis (1): input has {input.shape[1]}, weight expects {c_in}")
    if k % 2 == 0:
        raise ShapeError(f"kernel axis (2): kernel size must be odd, got {k}")
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias axis (0): expected {c_out}, got {tuple(bias.shape)}")
    return F.conv1d(input, weight, bias, padding=dilation * (k - 1) // 2, dilation=dilation)


def transposed_conv1d(input: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                      stride: int = 1) -> torch.Tensor:
    """Upsample [B, Cin, T] to exactly [B, Cout, T*stride].

    ``weight`` has shape [Cin, Cout, K] with K >= stride and K - stride even;
    the surplus is trimmed symmetrically.
    """
    _expect_rank(input, 3, "input")
    _expect_rank(weight, 3, "weight")
    c_in, c_out, k = weight.shape
    if input.shape[1] != c_in:
        raise ShapeError(f"channel axis (1): input has {input.shape[1]}, weight expects {c_in}")
    if stride < 1 or k < stride or (k - stride) % 2:
        raise ShapeError(f"kernel axis (2): need K >= stride and K - stride even (K={k}, stride={stride})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias axis (0): expected {c_out}, got {tuple(bias.shape)}")
    return F.conv_transpose1d(input, weight, bias, stride=stride, padding=(k - stride) // 2)


class Conv1d(nn.Conv1d):
    """``nn.Conv1d`` storage and default init, routed through :func:`conv1d`."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1,
                 dilation: int = 1, bias: bool = True):
        super().__init__(in_channels, out_channels, kernel_size, dilation=dilation, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv1d(x, self.weight, self.bias, self.dilation[0])

    def zero_(self) -> "Conv1d":
        nn.init.zeros_(self.weight)
        if self.bias is not None:
            nn.init.zeros_(self.bias)
        return self


def _channel_view(v: torch.Tensor | float, like: torch.Tensor) -> torch.Tensor | float:
    # Scalars broadcast against anything; vectors only along the channel axis.
    if not isinstance(v, torch.Tensor) or v.dim() == 0:
        return v
    if v.dim() == 1:
        if like.dim() < 2 or v.shape[0] != like.shape[1]:
            raise ShapeError(f"channel axis (1): vector of {v.shape[0]} vs tensor {tuple(like.shape)}")
        return v.view(1, -1, *([1] * (like.dim() - 2)))
    if v.shape != like.shape:
        raise ShapeError(f"shape mismatch: {tuple(v.shape)} vs {tuple(like.shape)}")
    return v


def add(x: torch.Tensor, y) -> torch.Tensor:
    return x + _channel_view(y, x)


def mul(x: torch.Tensor, y) -> torch.Tensor:
    return x * _channel_view(y, x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def log(x: torch.Tensor) -> torch.Tensor:
    if bool((x <= 0).any()):
        raise DomainError("log of non-positive value")
    return torch.log(x)


def gate(a_f: torch.Tensor, a_g: torch.Tensor) -> torch.Tensor:
    return torch.tanh(a_f) * torch.sigmoid(a_g)


def scale_and_shift(x: torch.Tensor, s, b) -> torch.Tensor:
    """Per-channel affine map ``s * x + b``."""
    return x * _channel_view(s, x) + _channel_view(b, x)


def _axes(x: torch.Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.dim()))
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    for a in axes:
        if not -x.dim() <= a < x.dim():
            raise DomainError(f"axis {a} out of range for rank {x.dim()}")
    return axes


def sum(x: torch.Tensor, axes=None) -> torch.Tensor:  # noqa: A001
    axes = _axes(x, axes)
    return x.sum(dim=axes) if axes else x


def mean(x: torch.Tensor, axes=None) -> torch.Tensor:
    axes = _axes(x, axes)
    if math.prod(x.shape[a] for a in axes) == 0:
        raise DomainError("mean over an empty reduction")
    return x.mean(dim=axes) if axes else x


def batch_stats(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and population std over the batch and length axes."""
    _expect_rank(x, 3, "x")
    if x.shape[0] * x.shape[2] == 0:
        raise DomainError("batch_stats over an empty batch")
    m = x.mean(dim=(0, 2))
    var = ((x - m.view(1, -1, 1)) ** 2).mean(dim=(0, 2))
    return m, var.sqrt()


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every leaf that requires it."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def vjp(output: torch.Tensor, state: torch.Tensor, v: torch.Tensor,
        create_graph: bool | None = None) -> torch.Tensor:
    """Return ``v^T (d output / d state)`` with ``state``'s shape.

    With ``create_graph`` (default: whenever grad mode is on) the result is
    itself differentiable, which is what lets a loss containing the trace
    estimate be backpropagated to the network parameters.
    """
    if v.shape != output.shape:
        raise ShapeError(f"v has shape {tuple(v.shape)}, output has {tuple(output.shape)}")
    if not output.requires_grad:
        raise ValueError("output is detached from state; no graph to differentiate")
    if create_graph is None:
        create_graph = torch.is_grad_enabled()
    (g,) = torch.autograd.grad(output, state, v, retain_graph=True,
                               create_graph=create_graph, allow_unused=True)
    return torch.zeros_like(state) if g is None else g
