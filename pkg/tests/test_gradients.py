"""Finite-difference gradient checks for every trainable block.

Each check compares autograd against central differences in double
precision. Inputs are kept away from clamp/relu kinks by fixed seeds and
mid-range values; tolerances come from oracles.check_grads_close.
"""
import torch

from gmmoe.blocks import (
    SFEB,
    ColorExpert,
    DetailExpert,
    FeatureExpert,
    GateNetwork,
    GmMoeBlock,
    GmMoeBlockConfig,
)
from gmmoe.network import ModelConfig, build_model
from oracles import check_grads_close, finite_difference_param_grads

CFG4 = GmMoeBlockConfig(channels=4, sfeb_kernel=3, sfeb_dilations=(1, 2),
                        attention_kernel=3)


def _mid_input(seed, shape):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(*shape, generator=g, dtype=torch.float64) * 0.5 + 0.25)


def _assert_fd_matches(module, forward, seed):
    """forward: () -> output tensor; FD-checks every parameter of module."""
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        ref = forward()
    proj = torch.rand(*ref.shape, generator=g, dtype=torch.float64) - 0.5

    def make_loss():
        return (forward() * proj).sum()

    module.zero_grad()
    make_loss().backward()
    numeric = finite_difference_param_grads(module, make_loss)
    for name, p in module.named_parameters():
        assert p.grad is not None, f"{name} got no gradient"
        ok, worst, where = check_grads_close(p.grad.numpy(), numeric[name])
        assert ok, f"{name}: worst ratio {worst:.3g} at {where}"


def test_gate_network_gradients():
    gate = GateNetwork(4).double()
    x = _mid_input(0, (2, 4, 8, 8))
    _assert_fd_matches(gate, lambda: gate(x), seed=0)


def test_color_expert_gradients():
    expert = ColorExpert(4).double()
    x = _mid_input(1, (1, 4, 8, 8))
    _assert_fd_matches(expert, lambda: expert(x), seed=1)


def test_detail_expert_gradients():
    expert = DetailExpert(4, attention_kernel=3).double()
    x = _mid_input(2, (1, 4, 8, 8))
    _assert_fd_matches(expert, lambda: expert(x), seed=2)


def test_feature_expert_gradients():
    expert = FeatureExpert(4).double()
    x = _mid_input(3, (1, 4, 8, 8))
    _assert_fd_matches(expert, lambda: expert(x), seed=3)


def test_sfeb_gradients():
    sfeb = SFEB(4, kernel=3, dilations=(1, 2), attention_kernel=3).double()
    x = _mid_input(4, (1, 4, 8, 8))
    _assert_fd_matches(sfeb, lambda: sfeb(x), seed=4)


def test_moe_block_gradients():
    block = GmMoeBlock(CFG4).double()
    x = _mid_input(5, (1, 4, 8, 8))
    _assert_fd_matches(block, lambda: block(x), seed=5)


def test_tiny_network_gradients():
    cfg = ModelConfig(base_channels=4, num_levels=1, blocks_per_level=(1, 1),
                      sfeb_kernel=3, sfeb_dilations=(1, 2), attention_kernel=3,
                      zero_init_output=False)
    model = build_model(cfg, seed=11).double()
    # shrink the residual so x + residual stays inside the [0, 1] clamp
    with torch.no_grad():
        model.head.weight.mul_(0.05)
        model.head.bias.mul_(0.05)
    x = _mid_input(6, (1, 3, 8, 8))
    _assert_fd_matches(model, lambda: model(x), seed=6)
