import configparser

import numpy as np
import pytest

from busunet.architectures import (
    PRESETS,
    ChainConfig,
    Network,
    UNetConfig,
    build,
    build_bcdu,
    build_chain,
    census,
    chain_of,
    config_from_parser,
    config_to_text,
    load_config,
    module_census,
    preset,
    subnet_receptive_fields,
    with_base_channels,
)
from busunet.engine import functional as F
from busunet.engine.tensor import Tensor, backward
from busunet.errors import ConfigError, ShapeError


def conv_params(cin, cout, k):
    return cout * cin * k * k + cout


def closed_form_params(levels, base, d, cin=1, cout=1):
    """Per-layer bookkeeping: encoder blocks, dense bottleneck, decoder levels, head."""
    ch = [base * 2**lvl for lvl in range(levels + 1)]
    total, prev = 0, cin
    for lvl in range(levels):
        total += conv_params(prev, ch[lvl], 3) + conv_params(ch[lvl], ch[lvl], 3)
        prev = ch[lvl]
    grow = ch[levels]
    for i in range(d):
        total += conv_params(ch[levels - 1] + i * grow, grow, 3) + conv_params(grow, grow, 3)
    if d > 1:
        total += conv_params(ch[levels - 1] + d * grow, grow, 1)
    for lvl in range(levels):
        c = ch[lvl]
        total += conv_params(ch[lvl + 1], c, 3)  # upconv
        total += 2 * c  # batchnorm gamma, beta
        total += 2 * (4 * c * c * 9 * 2 + 4 * c)  # two ConvLSTM directions
        total += conv_params(2 * c, c, 3)  # projection
        total += 2 * conv_params(c, c, 3)  # conv block
    return total + conv_params(ch[0], cout, 1)


# census --------------------------------------------------------------------


def test_preset_censuses():
    assert census(preset("busu")).count == 108
    assert census(preset("lightbusu")).count == 43


def test_bcdu_d1_preset():
    assert preset("bcdu_d1").d == 1
    assert preset("bcdu_d3").d == 3
    assert preset("bcdu_d1").levels == preset("bcdu_d3").levels == 4


def test_ladder_is_two_equal_depth_subnets():
    ladder = preset("ladderbcdu")
    assert len(ladder.nets) == 2 and ladder.nets[0].levels == ladder.nets[1].levels == 4
    assert census(ladder).count == 88


def test_unknown_preset_lists_valid_names():
    with pytest.raises(ConfigError) as err:
        preset("unet")
    for name in PRESETS:
        assert name in str(err.value)


def test_minimal_census_matches_manual_enumeration():
    names = [layer.name for layer in census(UNetConfig(1, 1, 1)).layers]
    assert names == [
        "net.u0.enc0.conv1", "net.u0.enc0.conv2",
        "net.u0.mid.stage1_conv1", "net.u0.mid.stage1_conv2",
        "net.u0.dec0.upconv", "net.u0.dec0.bn", "net.u0.dec0.lstm_fwd", "net.u0.dec0.lstm_bwd",
        "net.u0.dec0.proj", "net.u0.dec0.conv1", "net.u0.dec0.conv2",
        "net.u0.head.conv",
    ]


def test_census_is_additive_over_chain():
    a, b = UNetConfig(3, 2, d=2), UNetConfig(2, 2, d=1, in_channels=2)
    assert census(ChainConfig((a, b))).count == census(a).count + census(b).count


def test_census_independent_of_input_size():
    net = build(UNetConfig(2, 2, 1))
    before = census(net).count
    net(Tensor(np.zeros((1, 1, 8, 8))))
    net(Tensor(np.zeros((1, 1, 16, 12))))
    assert census(net).count == before


@pytest.mark.parametrize("cfg", [preset("lightbusu"), UNetConfig(2, 3, d=3), with_base_channels(preset("bcdu_d3"), 2)])
def test_module_walk_agrees_with_config_census(cfg):
    net = build(cfg)
    a, b = census(cfg), module_census(net)
    assert [(x.name, x.params) for x in a.layers] == [(x.name, x.params) for x in b.layers]
    assert a.num_parameters == net.num_parameters()


def test_parameter_count_closed_form():
    assert closed_form_params(2, 4, 1) == 20569
    assert build_bcdu(UNetConfig(2, 4, d=1)).num_parameters() == 20569
    for levels, base, d in [(1, 1, 1), (3, 2, 3), (2, 5, 4)]:
        assert census(UNetConfig(levels, base, d)).num_parameters == closed_form_params(levels, base, d)


def test_big_u_receptive_field_exceeds_small_u():
    big, small = subnet_receptive_fields(preset("busu"))
    assert big > small
    big, small = subnet_receptive_fields(preset("lightbusu"))
    assert big > small


def test_census_listing_format():
    text = census(preset("lightbusu")).format()
    assert "total layers: 43" in text
    assert "net.u1.head.conv" in text


# building and forward ------------------------------------------------------


def test_minimal_instance_forward():
    out = build_bcdu(UNetConfig(1, 1, 1))(Tensor(np.random.default_rng(0).random((1, 1, 8, 8))))
    assert out.shape == (1, 1, 8, 8)
    assert np.all((out.data > 0) & (out.data < 1))


def test_lightbusu_forward_range(rng):
    net = build(preset("lightbusu"), seed=3)
    out = net(Tensor(rng.random((2, 1, 16, 16))))
    assert out.shape == (2, 1, 16, 16)
    assert np.all((out.data > 0) & (out.data < 1))


def test_input_divisibility_checked():
    net = build(preset("lightbusu"))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 1, 10, 8))))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 2, 8, 8))))


def test_single_subnet_chain_equals_bcdu(rng):
    cfg = UNetConfig(2, 2, d=2)
    x = Tensor(rng.random((1, 1, 8, 8)))
    a, b = build_bcdu(cfg, seed=4), Network(ChainConfig((cfg,)), seed=4)
    assert census(a.config).count == census(b.config).count
    np.testing.assert_array_equal(a(x).data, b(x).data)


def test_build_chain_requires_two_subnets():
    with pytest.raises(ConfigError):
        build_chain(ChainConfig((UNetConfig(1, 1),)))


def test_junction_channel_mismatch():
    bad = ChainConfig((UNetConfig(2, 2), UNetConfig(1, 2, in_channels=1)))
    with pytest.raises(ConfigError):
        build_chain(bad)


def test_busu_requires_deeper_big_u():
    with pytest.raises(ConfigError):
        build_chain(chain_of(UNetConfig(2, 2), UNetConfig(2, 2), kind="busu"))


def test_chain_of_sets_junction_width():
    chain = chain_of(UNetConfig(3, 2), UNetConfig(2, 2))
    assert chain.nets[1].in_channels == 2


def test_same_seed_same_parameters():
    a, b = build(preset("lightbusu"), seed=11), build(preset("lightbusu"), seed=11)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_parameter_names_follow_convention():
    names = [n for n, _ in build(preset("lightbusu")).named_parameters()]
    assert names[0] == "net.u0.enc0.conv1.weight"
    assert "net.u1.dec0.lstm_bwd.wh" in names
    assert all(n.startswith(("net.u0.", "net.u1.")) for n in names)


def test_gradient_reaches_every_parameter(rng):
    net = build(with_base_channels(preset("lightbusu"), 2), seed=0, dtype=np.float64)
    x = Tensor(rng.random((2, 1, 8, 8)), dtype=np.float64)
    y = (rng.random((2, 1, 8, 8)) < 0.3).astype(float)
    backward(F.bce_with_logits(net.logits(x), y), net.parameters())
    for name, p in net.named_parameters():
        scale = np.abs(p.grad).max()
        if name.endswith("upconv.bias"):
            # a bias feeding straight into train-mode batchnorm cancels out exactly
            assert scale < 1e-12, name
        else:
            assert scale > 1e-8, name


# config files --------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_config_text_round_trip(name):
    parser = configparser.ConfigParser()
    parser.read_string(config_to_text(preset(name)))
    back = config_from_parser(parser)
    chain = back if isinstance(back, ChainConfig) else ChainConfig((back,))
    original = preset(name)
    expected = original if isinstance(original, ChainConfig) else ChainConfig((original,), kind="chain")
    assert chain.nets == expected.nets


def test_load_config_overrides_base(tmp_path):
    path = tmp_path / "arch.ini"
    path.write_text("[u0]\nbase_channels = 4\n[u1]\nd = 1\njunction = input+logits\n")
    cfg = load_config(path, base=preset("lightbusu"))
    assert cfg.nets[0].base_channels == 4 and cfg.nets[0].levels == 2
    assert cfg.nets[1].d == 1 and cfg.nets[1].in_channels == 2
    assert cfg.kind == "lightbusu"


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[u0]\nlevels = 2\nwidth = 3\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    partial = tmp_path / "partial.ini"
    partial.write_text("[u0]\nlevels = 2\n")
    with pytest.raises(ConfigError):
        load_config(partial)
