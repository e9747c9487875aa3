import pytest
import torch

import oracles
from helpers import random_dht, random_gta, random_ltc, rel_err
from hocslm.dht import DualPathTemporal, LocalTemporalConv, PlainTemporalConv
from hocslm.errors import ShapeMismatch


@pytest.mark.parametrize("seed", range(4))
def test_gta_matches_oracle(seed):
    layer, x = random_gta(seed, c=4, n=3, t=7)
    s_g, s = layer.attend(x)
    expected, s_expected = oracles.gta_attend(oracles.np_params(layer), x[0].numpy())
    assert rel_err(s[0].detach(), s_expected) < 1e-12
    assert rel_err(s_g[0].detach(), expected) < 1e-12


def test_gta_rows_are_stochastic():
    layer, x = random_gta(1, 6, 4, 8, batch=3)
    _, s = layer.attend(x)
    assert s.shape == (3, 8, 8)
    assert torch.all(s >= 0)
    assert torch.allclose(s.sum(-1), torch.ones(3, 8, dtype=torch.float64), atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_ltc_branches_match_oracle(seed):
    layer, x = random_ltc(seed, c_in=3, c_out=8, n=2, t=8)
    got = layer.branches(x)
    expected = oracles.ltc_branches(oracles.np_params(layer), x[0].numpy())
    for g, e in zip(got, expected):
        assert g.shape[1:] == e.shape
        assert rel_err(g[0].detach(), e) < 1e-12


def test_dilated_branch_receptive_field():
    # an impulse at frame 4 reaches frames 0, 2, 4, 6, 8 through the dilation-2 kernel
    layer = LocalTemporalConv(1, 4).double()
    with torch.no_grad():
        layer.branch2[0].weight.fill_(1.0)
        layer.branch2[0].bias.zero_()
        layer.branch2[1].weight.fill_(1.0)
        layer.branch2[1].bias.zero_()
    x = torch.zeros(1, 1, 9, 1, dtype=torch.float64)
    x[0, 0, 4, 0] = 1.0
    out = layer.branches(x)[1][0, 0, :, 0]
    assert out.nonzero().flatten().tolist() == [0, 2, 4, 6, 8]


def test_ltc_preserves_length_and_width():
    layer, x = random_ltc(0, 5, 12, 3, 7, batch=2)
    assert layer(x).shape == (2, 12, 7, 3)


def test_ltc_width_must_split_in_four():
    with pytest.raises(ValueError):
        LocalTemporalConv(4, 6)


@pytest.mark.parametrize("use_gta,use_ltc", [(True, True), (True, False), (False, True)])
def test_dual_path_matches_oracle(use_gta, use_ltc):
    layer, x = random_dht(2, 4, 3, 6, use_gta=use_gta, use_ltc=use_ltc)
    expected = oracles.dht_forward(oracles.np_params(layer), x[0].numpy(), use_gta, use_ltc)
    assert rel_err(layer(x)[0].detach(), expected) < 1e-12


def test_dual_path_default_weights():
    layer = DualPathTemporal(8, 8)
    assert layer.lambda_g.item() == layer.lambda_l.item() == 1.0
    with pytest.raises(ValueError):
        DualPathTemporal(8, 8, use_gta=False, use_ltc=False)


def test_shape_errors():
    layer, x = random_gta(0, 4, 3, 5)
    with pytest.raises(ShapeMismatch):
        layer(x[:, :2])
    ltc, y = random_ltc(0, 4, 8, 3, 5)
    with pytest.raises(ShapeMismatch):
        ltc(y[0])


def test_plain_temporal_conv_keeps_length():
    layer = PlainTemporalConv(4, 6)
    assert layer(torch.randn(2, 4, 9, 3)).shape == (2, 6, 9, 3)
