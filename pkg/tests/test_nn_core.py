import copy
import math

import numpy as np
import pytest
import torch

from regen_mfg.exceptions import CompatibilityError, ConfigError, ShapeError
from regen_mfg.nn_core import (GradientBuffer, Mlp, RmsPropState, load_checkpoint, mlp_backward, mlp_forward,
                               parameter_hash, rmsprop_step, save_checkpoint)


@pytest.fixture
def net():
    return Mlp([3, 8, 8, 2], "sine", torch.Generator().manual_seed(0)).double()


def test_forward_shapes(net):
    assert mlp_forward(net, torch.zeros(3, dtype=torch.float64)).shape == (2,)
    assert mlp_forward(net, torch.zeros(5, 3, dtype=torch.float64)).shape == (5, 2)


def test_wrong_input_dimension(net):
    with pytest.raises(ShapeError):
        mlp_forward(net, torch.zeros(4, 4, dtype=torch.float64))


def test_invalid_topology():
    with pytest.raises(ShapeError):
        Mlp([3])
    with pytest.raises(ConfigError):
        Mlp([3, 2], "tanh")


def test_biases_start_at_zero(net):
    for layer in net.layers:
        assert torch.all(layer.bias == 0)


def test_backward_matches_finite_differences(net):
    torch.manual_seed(1)
    x = torch.randn(4, 3, dtype=torch.float64)
    upstream = torch.randn(4, 2, dtype=torch.float64)
    grads, x_grad = mlp_backward(net, x, upstream)

    eps = 1e-6
    weight = net.layers[1].weight
    for (i, j) in [(0, 0), (3, 5), (7, 2)]:
        with torch.no_grad():
            weight[i, j] += eps
            plus = (net(x) * upstream).sum().item()
            weight[i, j] -= 2 * eps
            minus = (net(x) * upstream).sum().item()
            weight[i, j] += eps
        assert grads["layers.1.weight"][i, j].item() == pytest.approx((plus - minus) / (2 * eps), rel=1e-6, abs=1e-9)

    with torch.no_grad():
        shifted = x.clone()
        shifted[2, 1] += eps
        plus = (net(shifted) * upstream).sum().item()
        shifted[2, 1] -= 2 * eps
        minus = (net(shifted) * upstream).sum().item()
    assert x_grad[2, 1].item() == pytest.approx((plus - minus) / (2 * eps), rel=1e-6, abs=1e-9)


def _set_layers(net, weights, biases):
    with torch.no_grad():
        for layer, w, b in zip(net.layers, weights, biases):
            layer.weight.copy_(torch.tensor(w, dtype=torch.float64))
            layer.bias.copy_(torch.tensor(b, dtype=torch.float64))
    return net


def test_zero_network_outputs_zero():
    net = Mlp([2, 3, 1], "sine").double()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    x = torch.randn(6, 2, dtype=torch.float64)
    assert torch.equal(mlp_forward(net, x), torch.zeros(6, 1, dtype=torch.float64))


def test_single_identity_layer_is_identity():
    net = _set_layers(Mlp([2, 2]).double(), [[[1.0, 0.0], [0.0, 1.0]]], [[0.0, 0.0]])
    x = torch.tensor([[0.3, -1.7], [2.0, 5.0]], dtype=torch.float64)
    assert torch.equal(mlp_forward(net, x), x)


@pytest.mark.parametrize("activation,expected", [
    ("relu", 5.5),
    ("sine", math.sin(0.5) + 2.0 * math.sin(3.0) - 1.0),
])
def test_two_layer_forward_by_hand(activation, expected):
    net = _set_layers(Mlp([2, 2, 1], activation).double(),
                      [[[1.0, -1.0], [2.0, 1.0]], [[1.0, 2.0]]], [[0.5, 0.0], [-1.0]])
    out = mlp_forward(net, torch.tensor([1.0, 1.0], dtype=torch.float64))
    assert out.item() == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("activation", ["relu", "sine"])
def test_backward_matches_finite_differences_on_random_draws(activation):
    rng = np.random.default_rng(11)
    eps = 1e-6
    for draw in range(60):
        net = Mlp([3, 6, 5, 2], activation, torch.Generator().manual_seed(draw)).double()
        with torch.no_grad():
            for layer in net.layers:
                layer.bias.uniform_(-0.5, 0.5, generator=torch.Generator().manual_seed(1000 + draw))
        x = torch.as_tensor(rng.standard_normal((4, 3)))
        upstream = torch.as_tensor(rng.standard_normal((4, 2)))
        grads, _ = mlp_backward(net, x, upstream)
        names = [name for name, _ in net.named_parameters()]
        name = names[rng.integers(len(names))]
        param = dict(net.named_parameters())[name]
        flat = int(rng.integers(param.numel()))
        with torch.no_grad():
            view = param.view(-1)
            view[flat] += eps
            plus = (net(x) * upstream).sum().item()
            view[flat] -= 2 * eps
            minus = (net(x) * upstream).sum().item()
            view[flat] += eps
        fd = (plus - minus) / (2 * eps)
        assert grads[name].reshape(-1)[flat].item() == pytest.approx(fd, rel=1e-5, abs=1e-7), (draw, name, flat)


def test_backward_rejects_mismatched_upstream(net):
    with pytest.raises(ShapeError):
        mlp_backward(net, torch.zeros(4, 3, dtype=torch.float64), torch.zeros(4, 3, dtype=torch.float64))


def test_first_rmsprop_step_from_fresh_state(net):
    state = RmsPropState(net)
    grads = GradientBuffer({name: torch.full_like(p, 0.5) for name, p in net.named_parameters()})
    before = {name: p.detach().clone() for name, p in net.named_parameters()}
    rmsprop_step(net, grads, state, lr=1e-3)
    for name, p in net.named_parameters():
        g = 0.5
        expected = before[name] - 1e-3 * g / ((0.01 * g * g) ** 0.5 + 1e-8)
        assert torch.allclose(p.detach(), expected, rtol=0, atol=1e-12)
    assert torch.allclose(state.mean_square()["layers.0.weight"], torch.full_like(net.layers[0].weight, 0.0025))


def test_ascent_and_descent_are_mirror_images(net):
    torch.manual_seed(2)
    grads = GradientBuffer({name: torch.randn_like(p) for name, p in net.named_parameters()})
    start = {name: p.detach().clone() for name, p in net.named_parameters()}

    up_net, up_state = copy.deepcopy((net, RmsPropState(net)))
    down_net, down_state = copy.deepcopy((net, RmsPropState(net)))
    rmsprop_step(up_net, grads, up_state, lr=1e-2, ascend=True)
    rmsprop_step(down_net, grads, down_state, lr=1e-2, ascend=False)
    for (name, up), (_, down) in zip(up_net.named_parameters(), down_net.named_parameters()):
        assert torch.allclose(up - start[name], -(down - start[name]), atol=1e-14)


def test_zero_gradient_leaves_parameters(net):
    state = RmsPropState(net)
    before = parameter_hash(net)
    rmsprop_step(net, GradientBuffer.zeros_like(net), state, lr=1e-2)
    assert parameter_hash(net) == before


def test_zero_gradient_decays_mean_square(net):
    state = RmsPropState(net)
    rmsprop_step(net, GradientBuffer({name: torch.full_like(p, 0.5) for name, p in net.named_parameters()}),
                 state, lr=1e-3)
    first = state.mean_square()
    before = parameter_hash(net)
    rmsprop_step(net, GradientBuffer.zeros_like(net), state, lr=1e-3)
    assert parameter_hash(net) == before
    for name, value in state.mean_square().items():
        assert torch.allclose(value, 0.99 * first[name], rtol=0, atol=1e-15)
        assert torch.allclose(value, torch.full_like(value, 0.99 * 0.0025), rtol=0, atol=1e-15)


def test_nonpositive_learning_rate(net):
    with pytest.raises(ConfigError):
        rmsprop_step(net, GradientBuffer.zeros_like(net), RmsPropState(net), lr=0.0)


def test_incongruent_gradient_buffer(net):
    grads = GradientBuffer.zeros_like(net)
    grads.values["layers.0.weight"] = torch.zeros(1, 1, dtype=torch.float64)
    with pytest.raises(ShapeError):
        rmsprop_step(net, grads, RmsPropState(net), lr=1e-3)


def test_parameter_hash_is_reproducible():
    a = Mlp([2, 4, 1], generator=torch.Generator().manual_seed(7))
    b = Mlp([2, 4, 1], generator=torch.Generator().manual_seed(7))
    c = Mlp([2, 4, 1], generator=torch.Generator().manual_seed(8))
    assert parameter_hash(a) == parameter_hash(b)
    assert parameter_hash(a) != parameter_hash(c)


def test_checkpoint_round_trip(tmp_path, net):
    path = save_checkpoint(tmp_path / "ck.pt", {"value": net}, iteration=12)
    fresh = Mlp([3, 8, 8, 2], "sine").double()
    payload = load_checkpoint(path, {"value": fresh})
    assert payload["iteration"] == 12
    assert parameter_hash(fresh) == parameter_hash(net)


def test_checkpoint_layer_mismatch(tmp_path, net):
    path = save_checkpoint(tmp_path / "ck.pt", {"value": net}, iteration=0)
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, {"value": Mlp([3, 16, 2], "sine")})
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, {"control": net})
    with pytest.raises(CompatibilityError):
        load_checkpoint(tmp_path / "missing.pt", {"value": net})


if __name__ == "__main__":
    pytest.main(["-v"])
