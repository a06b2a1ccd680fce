import pytest
import torch

from cnf_vocoder import autodiff as ad
from cnf_vocoder.dynamics import DynamicsConfig, GatedDilatedDynamics, measured_receptive_field

D = torch.float64


def net_with_live_head(cfg: DynamicsConfig, seed: int = 0) -> GatedDilatedDynamics:
    torch.manual_seed(seed)
    net = GatedDilatedDynamics(cfg).double()
    with torch.no_grad():
        net.end_out.weight.normal_(0, 0.3)
        net.end_out.bias.normal_(0, 0.3)
    return net


def small(**kw) -> DynamicsConfig:
    base = dict(n_layers=4, kernel_size=3, residual_channels=8, skip_channels=8, dilation_base=3,
                in_channels=2, cond_channels=3)
    base.update(kw)
    return DynamicsConfig(**base)


def test_fresh_network_is_zero_field():
    net = GatedDilatedDynamics(small()).double()
    z = torch.randn(2, 2, 30, dtype=D)
    c = torch.randn(2, 3, 30, dtype=D)
    for t in (0.0, 0.3, 1.0):
        assert net(z, t, c).abs().max() == 0


def test_time_enters_as_global_bias():
    net = net_with_live_head(small())
    z = torch.randn(1, 2, 25, dtype=D)
    c = torch.randn(1, 3, 25, dtype=D)
    delta = net.layer0_preactivation(z, 0.7, c) - net.layer0_preactivation(z, 0.0, c)
    assert torch.allclose(delta, delta[:, :, :1].expand_as(delta), atol=1e-14)
    assert delta.abs().max() > 0


def test_output_depends_on_time_and_condition():
    net = net_with_live_head(small())
    z = torch.randn(1, 2, 25, dtype=D)
    c = torch.randn(1, 3, 25, dtype=D)
    base = net(z, 0.2, c)
    assert (net(z, 0.9, c) - base).abs().max() > 1e-8
    assert (net(z, 0.2, c + 1) - base).abs().max() > 1e-8


def test_dilations_and_formula():
    assert small().dilations == [1, 3, 9, 27]
    assert small().receptive_field == 80
    assert small(dilation_base=2).receptive_field == 30


@pytest.mark.parametrize("base,extent", [(3, 80), (2, 30)])
def test_impulse_receptive_field(base, extent):
    net = net_with_live_head(small(dilation_base=base))
    span, hits = measured_receptive_field(net)
    assert span == extent
    assert hits == extent + 1


def test_perturbation_stays_within_half_span_and_is_non_causal():
    net = net_with_live_head(small())
    length, j = 200, 100
    z = torch.randn(1, 2, length, dtype=D)
    c = torch.randn(1, 3, length, dtype=D)
    bumped = z.clone()
    bumped[:, :, j] += 1.0
    with torch.no_grad():
        diff = (net(bumped, 0.5, c) - net(z, 0.5, c)).abs().amax(dim=(0, 1))
    idx = torch.nonzero(diff > 0).flatten()
    assert int(idx.min()) == j - 40 and int(idx.max()) == j + 40


def test_shape_checks():
    net = GatedDilatedDynamics(small()).double()
    with pytest.raises(ad.ShapeError, match="length axis"):
        net(torch.randn(1, 2, 10, dtype=D), 0.0, torch.randn(1, 3, 9, dtype=D))
    with pytest.raises(ad.ShapeError, match="batch axis"):
        net(torch.randn(2, 2, 10, dtype=D), 0.0, torch.randn(1, 3, 10, dtype=D))


def test_invalid_config():
    with pytest.raises(ValueError):
        small(kernel_size=4)


def test_last_layer_has_no_residual():
    net = GatedDilatedDynamics(small())
    assert net.layers[-1].res_conv is None
    assert all(layer.res_conv is not None for layer in net.layers[:-1])
