import numpy as np
import pytest
import torch

import oracles
from helpers import random_cts, rel_err, small_mask
from hocslm.cts import CompositeTopologySpatial, StaticGraphConv, reduced_channels
from hocslm.errors import NonFiniteActivation, ShapeMismatch


@pytest.mark.parametrize("seed", range(5))
def test_matches_loop_oracle(seed):
    layer, x, mask = random_cts(seed, c_in=4, c_out=6, n=5, t=6)
    z = layer(x)[0].detach().numpy()
    expected = oracles.cts_forward(oracles.np_params(layer), x[0].numpy(), mask)
    assert rel_err(z, expected) < 1e-10


@pytest.mark.parametrize("use_gsm,use_lse", [(True, False), (False, True)])
def test_single_branch_matches_oracle(use_gsm, use_lse):
    layer, x, mask = random_cts(3, 4, 4, 5, 4, use_gsm=use_gsm, use_lse=use_lse)
    expected = oracles.cts_forward(oracles.np_params(layer), x[0].numpy(), mask, use_gsm, use_lse)
    assert rel_err(layer(x)[0].detach().numpy(), expected) < 1e-10


def test_intermediates_match_oracle():
    layer, x, mask = random_cts(11, 4, 4, 5, 3)
    acts = {}
    layer(x, activations=acts)
    p = oracles.np_params(layer)
    xb, xt = oracles.cts_preprocess(p, x[0].numpy())
    assert rel_err(acts["X_bar"][0].detach(), xb) < 1e-12
    assert rel_err(acts["X_tilde"][0].detach(), xt) < 1e-12
    assert rel_err(acts["E"][0].detach(), oracles.gram(xb)) < 1e-12
    assert rel_err(acts["A_l"][0].detach(), oracles.cts_local(p, xb, mask)) < 1e-12
    assert rel_err(acts["A_g"][0].detach(), oracles.cts_global(p, xt)) < 1e-12
    weights, a_base, a_sim, a_diff = oracles.attention_channel(p["w_q"], p["w_k"], p["w_v"], xt[1])
    assert rel_err(acts["attention"][0, 1].detach(), weights) < 1e-12
    assert rel_err(acts["A_sim"][0, 1].detach(), a_sim) < 1e-12
    assert rel_err(acts["A_diff"][0, 1].detach(), a_diff) < 1e-12


def test_activation_shapes():
    layer, x, _ = random_cts(0, 8, 16, 6, 5, batch=2, reduction=4)
    acts = {}
    z = layer(x, activations=acts)
    assert z.shape == (2, 16, 5, 6)
    assert acts["X_bar"].shape == (2, 2, 6)
    assert acts["X_tilde"].shape == (2, 2, 6, 6)
    assert acts["A_g_per_channel"].shape == (2, 2, 6, 6)
    assert acts["A_g"].shape == acts["A_s"].shape == (2, 16, 6, 6)
    assert acts["A_l"].shape == acts["E"].shape == acts["G"].shape == (2, 6, 6)


def test_default_coefficients():
    _, mask = small_mask()
    layer = CompositeTopologySpatial(16, 16, mask)
    for name in ("lambda_sim", "lambda_diff", "lambda_res"):
        assert torch.all(getattr(layer, name) == 0)
    assert layer.gamma.item() == 0.0
    assert layer.lambda_g.item() == 1.0
    assert layer.lambda_l.item() == pytest.approx(0.1)


def test_reduced_channels():
    assert reduced_channels(64, 8) == 8
    assert reduced_channels(3, 8) == 3
    assert reduced_channels(12, 8) == 12


def test_attention_rows_sum_to_one():
    layer, x, _ = random_cts(4, 4, 4, 6, 5, batch=3)
    acts = {}
    layer(x, activations=acts)
    sums = acts["attention"].sum(-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-12)


def test_local_topology_vanishes_off_mask():
    layer, x, mask = random_cts(5, 4, 4, 6, 5, batch=4)
    with torch.no_grad():
        layer.gamma.fill_(0.7)
    acts = {}
    layer(x, activations=acts)
    off = torch.as_tensor(mask == 0)
    assert torch.all(acts["A_l"][:, off] == 0)


def test_identical_rows_do_not_produce_nan():
    # Q = K rows coincide, so the pairwise distance is zero on the diagonal
    layer, _, _ = random_cts(6, 4, 4, 5, 3)
    x = torch.zeros(1, 4, 3, 5, dtype=torch.float64, requires_grad=True)
    layer(x).sum().backward()
    assert torch.isfinite(x.grad).all()
    assert all(torch.isfinite(p.grad).all() for p in layer.parameters())


def test_shape_errors():
    layer, x, _ = random_cts(0, 4, 4, 5, 3)
    with pytest.raises(ShapeMismatch):
        layer(x[:, :3])
    with pytest.raises(ShapeMismatch):
        layer(x[..., :4])
    with pytest.raises(ShapeMismatch):
        CompositeTopologySpatial(4, 4, np.ones((3, 4)))


def test_non_finite_input_is_reported():
    layer, x, _ = random_cts(0, 4, 4, 5, 3)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteActivation):
        layer(x)


def test_needs_one_branch():
    _, mask = small_mask()
    with pytest.raises(ValueError):
        CompositeTopologySpatial(4, 4, mask, use_gsm=False, use_lse=False)


def test_permutation_shared_init_is_equivariant():
    layer = CompositeTopologySpatial(4, 4, np.ones((6, 6)), reduction=2).double()
    layer.permutation_shared_init(seed=3)
    x = torch.randn(1, 4, 5, 6, dtype=torch.float64)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    out = layer(x)
    assert torch.allclose(layer(x[..., perm]), out[..., perm], atol=1e-10)


def test_static_graph_conv_uses_normalized_adjacency():
    _, mask = small_mask()
    layer = StaticGraphConv(3, 4, mask).double()
    x = torch.randn(2, 3, 5, 6, dtype=torch.float64)
    a = layer.topology(x)[0, 0].numpy()
    deg = mask.sum(1)
    assert np.allclose(a, mask / np.sqrt(np.outer(deg, deg)))
    expected = torch.einsum("nm,bctm->bctn", layer.adjacency, layer.transform(x))
    assert torch.allclose(layer(x), expected)
