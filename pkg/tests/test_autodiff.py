import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cnf_vocoder import autodiff as ad

from helpers import fd_jacobian

D = torch.float64


def fd_grad(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central differences of a scalar function of a tensor."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel(a, b):
    return float((a - b).norm() / b.norm().clamp_min(1e-300))


# ---------------------------------------------------------------- convolutions

def test_conv_identity_kernel():
    x = torch.randn(2, 3, 7, dtype=D)
    w = torch.eye(3, dtype=D).unsqueeze(2)
    assert torch.equal(ad.conv1d(x, w, torch.zeros(3, dtype=D)), x)


def test_conv_dilated_hand_example():
    x = torch.tensor([[[0.0, 0, 1, 0, 0]]], dtype=D)
    w = torch.ones(1, 1, 3, dtype=D)
    out = ad.conv1d(x, w, dilation=2)
    assert out.flatten().tolist() == [1.0, 0.0, 1.0, 0.0, 1.0]


@pytest.mark.parametrize("dilation", [1, 2, 3])
def test_conv_weight_gradient_matches_fd(dilation):
    g = torch.Generator().manual_seed(dilation)
    x = torch.randn(1, 2, 8, generator=g, dtype=D)
    w = torch.randn(3, 2, 3, generator=g, dtype=D, requires_grad=True)
    ad.conv1d(x, w, dilation=dilation).sum().backward()
    fd = fd_grad(lambda w_: ad.conv1d(x, w_, dilation=dilation).sum(), w.detach().clone())
    assert rel(w.grad, fd) < 1e-6


def test_conv_errors_name_axes():
    x = torch.randn(1, 2, 8)
    with pytest.raises(ad.ShapeError, match="channel axis"):
        ad.conv1d(x, torch.randn(1, 3, 3))
    with pytest.raises(ad.ShapeError, match="odd"):
        ad.conv1d(x, torch.randn(1, 2, 2))
    with pytest.raises(ad.ShapeError, match="rank"):
        ad.conv1d(x[0], torch.randn(1, 2, 3))


def test_transposed_conv_identity():
    x = torch.randn(2, 3, 5, dtype=D)
    w = torch.eye(3, dtype=D).unsqueeze(2)
    assert torch.equal(ad.transposed_conv1d(x, w, stride=1), x)


def test_transposed_conv_length():
    x = torch.randn(1, 80, 4)
    w = torch.randn(80, 80, 512)
    assert ad.transposed_conv1d(x, w, stride=256).shape == (1, 80, 1024)


def test_transposed_conv_gradient_matches_fd():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 2, 3, generator=g, dtype=D, requires_grad=True)
    w = torch.randn(2, 2, 8, generator=g, dtype=D, requires_grad=True)
    b = torch.randn(2, generator=g, dtype=D, requires_grad=True)
    loss = lambda x_, w_, b_: (ad.transposed_conv1d(x_, w_, b_, stride=4) ** 2).sum()
    loss(x, w, b).backward()
    for t, idx in ((x, 0), (w, 1), (b, 2)):
        args = [x.detach(), w.detach(), b.detach()]
        base = args[idx].clone()

        def f(v, idx=idx):
            a = list(args)
            a[idx] = v
            return loss(*a)
        assert rel(t.grad, fd_grad(f, base)) < 1e-6


def test_transposed_conv_rejects_bad_kernel():
    with pytest.raises(ad.ShapeError):
        ad.transposed_conv1d(torch.randn(1, 1, 3), torch.randn(1, 1, 5), stride=4)


def test_conv_module_zero_and_routing():
    m = ad.Conv1d(2, 3, 3, dilation=2).double()
    x = torch.randn(1, 2, 9, dtype=D)
    assert torch.allclose(m(x), ad.conv1d(x, m.weight, m.bias, 2))
    assert m.zero_()(x).abs().max() == 0


# ---------------------------------------------------------------- elementwise

def test_gate_of_zero_is_zero():
    z = torch.zeros(3)
    assert ad.tanh(z).abs().max() == 0
    assert torch.all(ad.sigmoid(z) == 0.5)
    assert ad.gate(z, z).abs().max() == 0


def test_scale_and_shift_identity():
    x = torch.randn(2, 3, 4)
    assert torch.equal(ad.scale_and_shift(x, 1.0, 0.0), x)
    assert torch.equal(ad.scale_and_shift(x, torch.ones(3), torch.zeros(3)), x)


def test_gate_derivative_matches_fd():
    x = torch.tensor(0.3, dtype=D, requires_grad=True)
    ad.gate(x, x).backward()
    h = 1e-5
    f = lambda v: np.tanh(v) / (1 + np.exp(-v))
    fd = (f(0.3 + h) - f(0.3 - h)) / (2 * h)
    assert abs(x.grad.item() - fd) < 1e-8


def test_log_domain():
    with pytest.raises(ad.DomainError):
        ad.log(torch.tensor([1.0, 0.0]))
    assert torch.allclose(ad.exp(ad.log(torch.tensor([2.0]))), torch.tensor([2.0]))


def test_broadcast_only_along_channels():
    x = torch.randn(2, 3, 4)
    assert ad.mul(x, torch.arange(3.0))[:, 1].equal(x[:, 1])
    with pytest.raises(ad.ShapeError):
        ad.add(x, torch.ones(4))


# ---------------------------------------------------------------- reductions

def test_batch_stats_constant_and_pair():
    m, s = ad.batch_stats(torch.full((2, 1, 3), 4.0))
    assert m.item() == 4.0 and s.item() == 0.0
    m, s = ad.batch_stats(torch.tensor([[[-1.0, 1.0]]]))
    assert m.item() == 0.0 and s.item() == 1.0


def test_sum_gradient_is_ones():
    x = torch.randn(2, 3, requires_grad=True)
    ad.backward(ad.sum(x))
    assert torch.equal(x.grad, torch.ones_like(x))


def test_mean_empty_raises():
    with pytest.raises(ad.DomainError):
        ad.mean(torch.empty(0, 3), axes=0)
    with pytest.raises(ad.DomainError):
        ad.sum(torch.ones(2), axes=3)


# ---------------------------------------------------------------- backward and vjp

def test_linear_loss_gradient_and_accumulation():
    x = torch.randn(5)
    w = torch.randn(5, requires_grad=True)
    ad.backward(ad.sum(w * x))
    assert torch.allclose(w.grad, x)
    ad.backward(ad.sum(w * x))
    assert torch.allclose(w.grad, 2 * x)


def test_backward_needs_scalar():
    w = torch.randn(3, requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(w * 2)


def test_vjp_first_row_of_matrix():
    A = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=D)
    z = torch.randn(2, dtype=D, requires_grad=True)
    g = ad.vjp(A @ z, z, torch.tensor([1.0, 0.0], dtype=D))
    assert g.tolist() == [1.0, 2.0]


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
@settings(max_examples=25, deadline=None)
def test_vjp_identity(vals):
    z = torch.randn(4, dtype=D, requires_grad=True)
    v = torch.tensor(vals, dtype=D)
    assert torch.equal(ad.vjp(z * 1.0, z, v), v)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
@settings(max_examples=25, deadline=None)
def test_vjp_is_linear_in_v(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(3, dtype=D, generator=g, requires_grad=True)
    out = torch.tanh(z) * z.sum()
    v1, v2 = torch.randn(3, dtype=D, generator=g), torch.randn(3, dtype=D, generator=g)
    lhs = ad.vjp(out, z, a * v1 + b * v2)
    rhs = a * ad.vjp(out, z, v1) + b * ad.vjp(out, z, v2)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_vjp_basis_sum_is_trace_of_fd_jacobian():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(6, 16), torch.nn.Tanh(), torch.nn.Linear(16, 6)).double()
    z0 = torch.randn(6, dtype=D)
    z = z0.clone().requires_grad_(True)
    out = net(z)
    tr = sum(ad.vjp(out, z, torch.eye(6, dtype=D)[d])[d] for d in range(6))
    with torch.no_grad():
        J = fd_jacobian(lambda v: net(torch.as_tensor(v)).numpy(), z0.numpy(), 1e-6)
    assert abs(tr.item() - np.trace(J)) < 1e-5


def test_vjp_unused_state_is_zero_and_detached_raises():
    z = torch.randn(3, requires_grad=True)
    other = torch.randn(3, requires_grad=True)
    assert torch.equal(ad.vjp(other * 2, z, torch.ones(3)), torch.zeros(3))
    with pytest.raises(ValueError):
        ad.vjp(torch.ones(3), z, torch.ones(3))


def test_vjp_create_graph_gives_second_derivative():
    z = torch.tensor([0.4], dtype=D, requires_grad=True)
    g = ad.vjp(z ** 3, z, torch.ones(1, dtype=D), create_graph=True)
    (h,) = torch.autograd.grad(g.sum(), z)
    assert abs(h.item() - 6 * 0.4) < 1e-12
