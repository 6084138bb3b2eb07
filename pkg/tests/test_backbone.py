"""Backbone tests: configuration ladders, encode/decode shapes, initialization,
and checkpoint round-trips."""

import numpy as np
import pytest
import torch

from ressegnet.backbone import (
    ConfigurationError,
    DecoderStep,
    NetworkConfig,
    UNetBackbone,
    init_parameters,
    parameter_count,
    read_checkpoint,
    save_checkpoint,
)

DESK = NetworkConfig(input_size=64, levels=4, base_channels=8)


def test_full_profile_ladders():
    cfg = NetworkConfig(input_size=640, levels=5, base_channels=32)
    assert cfg.encoder_channels() == [32, 64, 128, 256, 512]
    assert cfg.level_sizes() == [640, 320, 160, 80, 40]
    assert cfg.probmap_sizes() == [40, 80, 160, 320, 640]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        NetworkConfig(input_size=100, levels=5, base_channels=32)  # not divisible by 16
    with pytest.raises(ConfigurationError):
        NetworkConfig(input_size=64, levels=0)
    with pytest.raises(ConfigurationError):
        NetworkConfig(input_size=64, levels=4, base_channels=0)
    with pytest.raises(ConfigurationError):
        NetworkConfig(input_size=0, levels=1)


def test_encode_shapes_64_input_levels5():
    cfg = NetworkConfig(input_size=64, levels=5, base_channels=32)
    net = UNetBackbone(cfg)
    feats = net.encode(torch.rand(1, 3, 64, 64))
    sizes = [tuple(f.shape[1:]) for f in feats]
    assert sizes == [(32, 64, 64), (64, 32, 32), (128, 16, 16), (256, 8, 8), (512, 4, 4)]


def test_decode_shapes_desk_profile():
    net = UNetBackbone(DESK)
    feats = net.encode(torch.rand(2, 3, 64, 64))
    decs = net.decode(feats)
    # coarsest-first: bottleneck then each decoder output, spatial doubling
    assert [f.shape[-1] for f in decs] == [8, 16, 32, 64]
    assert [f.shape[1] for f in decs] == [64, 32, 16, 8]
    out = net(torch.rand(2, 3, 64, 64))
    assert [f.shape[-1] for f in out] == [8, 16, 32, 64]
    assert out[-1].shape == (2, 8, 64, 64)


def test_forward_rejects_wrong_input_size():
    net = UNetBackbone(DESK)
    with pytest.raises(ValueError):
        net.encode(torch.rand(1, 3, 32, 32))


def test_decoder_zero_coarse_depends_only_on_skip():
    torch.manual_seed(0)
    step = DecoderStep(16, 8, 3)
    init_parameters(step, seed=5)
    skip = torch.rand(1, 8, 10, 10)
    zero_coarse = torch.zeros(1, 16, 5, 5)
    # zero biases make the upsampled branch exactly zero
    assert step.up(zero_coarse).abs().max() == 0.0
    out = step(zero_coarse, skip)
    manual = step.conv1(step.conv0(torch.cat([torch.zeros(1, 8, 10, 10), skip], dim=1)))
    assert torch.equal(out, manual)


def test_decoder_rejects_mismatched_skip():
    step = DecoderStep(16, 8, 3)
    with pytest.raises(ValueError):
        step(torch.zeros(1, 16, 5, 5), torch.zeros(1, 8, 12, 12))


def test_parameter_count_stable():
    a = UNetBackbone(DESK)
    b = UNetBackbone(DESK)
    init_parameters(a, seed=0)
    init_parameters(b, seed=123)
    assert parameter_count(a) == parameter_count(b)
    # pure function of the config: report the desk-scale figure
    assert parameter_count(a) == sum(p.numel() for p in a.parameters())
    shapes_a = {k: tuple(v.shape) for k, v in a.state_dict().items()}
    shapes_b = {k: tuple(v.shape) for k, v in b.state_dict().items()}
    assert shapes_a == shapes_b


def test_init_deterministic_in_seed():
    a, b, c = UNetBackbone(DESK), UNetBackbone(DESK), UNetBackbone(DESK)
    init_parameters(a, seed=7)
    init_parameters(b, seed=7)
    init_parameters(c, seed=8)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)
    # zero biases, nonzero weights
    for name, p in a.named_parameters():
        if name.endswith("bias"):
            assert p.abs().max() == 0.0
        else:
            assert p.abs().max() > 0.0


def test_forward_finite_for_100_seeds():
    net = UNetBackbone(DESK)
    for seed in range(100):
        init_parameters(net, seed=seed)
        x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(seed))
        with torch.no_grad():
            feats = net.encode(x)
            decs = net.decode(feats)
        for t in list(feats) + list(decs):
            assert torch.isfinite(t).all()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = UNetBackbone(DESK)
    init_parameters(net, seed=3)
    state = {k: v.numpy() for k, v in net.state_dict().items()}
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, "UNetBaseline", DESK, state)
    kind, cfg, arrays = read_checkpoint(path)
    assert kind == "UNetBaseline"
    assert cfg == DESK
    assert set(arrays) == set(state)
    for key, value in state.items():
        assert arrays[key].dtype == value.dtype
        assert (arrays[key] == value).all()


def test_checkpoint_names_follow_module_layout(tmp_path):
    net = UNetBackbone(DESK)
    names = {k for k, _ in net.named_parameters()}
    for i in range(DESK.levels):
        assert any(n.startswith(f"enc{i}.conv0") for n in names)
        assert any(n.startswith(f"enc{i}.conv1") for n in names)
    for i in range(DESK.levels - 1):
        assert any(n.startswith(f"dec{i}.up") for n in names)
        assert any(n.startswith(f"dec{i}.conv0") for n in names)
