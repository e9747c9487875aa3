"""Small random instances shared by the unit, property and acceptance tests."""
import numpy as np
import torch

from hocslm.backbone import AblationConfig, BackboneConfig, HGLNet
from hocslm.cts import CompositeTopologySpatial
from hocslm.dht import DualPathTemporal, GlobalTemporalAttention, LocalTemporalConv
from hocslm.skeleton_io import physical_mask
from hocslm.ssf import SkeletonProjection

# a 6-joint tree: root 0 with a spine, two arms and one leg
SMALL_EDGES = [(0, 1), (1, 2), (1, 3), (3, 4), (0, 5)]


def tree_edges(n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Random tree on ``n`` joints rooted at 0."""
    return [(int(rng.integers(0, j)), j) for j in range(1, n)]


def small_mask(n: int = 6, rng=None) -> tuple[list, np.ndarray]:
    edges = SMALL_EDGES if (n == 6 and rng is None) else tree_edges(n, rng or np.random.default_rng(0))
    return edges, physical_mask(edges, n)


def _randomize(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.5) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def random_cts(seed: int, c_in: int, c_out: int, n: int, t: int, batch: int = 1,
               use_gsm: bool = True, use_lse: bool = True, reduction: int = 2):
    """float64 spatial layer with every coefficient nonzero, plus an input batch."""
    rng = np.random.default_rng(seed)
    _, mask = small_mask(n, rng)
    layer = CompositeTopologySpatial(c_in, c_out, mask, reduction, use_gsm=use_gsm, use_lse=use_lse).double()
    gen = torch.Generator().manual_seed(seed)
    _randomize(layer, gen)
    x = torch.randn(batch, c_in, t, n, generator=gen, dtype=torch.float64)
    return layer, x, mask


def random_dht(seed: int, c: int, n: int, t: int, batch: int = 1, use_gta=True, use_ltc=True):
    gen = torch.Generator().manual_seed(seed)
    layer = DualPathTemporal(c, c, use_gta, use_ltc).double()
    _randomize(layer, gen)
    x = torch.randn(batch, c, t, n, generator=gen, dtype=torch.float64)
    return layer, x


def random_gta(seed: int, c: int, n: int, t: int, batch: int = 1):
    gen = torch.Generator().manual_seed(seed)
    layer = GlobalTemporalAttention(c).double()
    _randomize(layer, gen)
    return layer, torch.randn(batch, c, t, n, generator=gen, dtype=torch.float64)


def random_ltc(seed: int, c_in: int, c_out: int, n: int, t: int, batch: int = 1):
    gen = torch.Generator().manual_seed(seed)
    layer = LocalTemporalConv(c_in, c_out).double()
    _randomize(layer, gen)
    return layer, torch.randn(batch, c_in, t, n, generator=gen, dtype=torch.float64)


def random_projection(seed: int, d: int, d_star: int, batch: int = 1):
    gen = torch.Generator().manual_seed(seed)
    proj = SkeletonProjection(d, d_star).double()
    _randomize(proj, gen, scale=1.0)
    return proj, torch.randn(batch, d, generator=gen, dtype=torch.float64)


def tiny_hglnet(seed: int, n: int = 5, t: int = 8, num_classes: int = 3, widths=((3, 8, 1), (8, 8, 2))):
    """Eval-mode float64 HGLNet with non-trivial batch-norm statistics."""
    rng = np.random.default_rng(seed)
    edges = tree_edges(n, rng)
    cfg = BackboneConfig(list(widths), num_classes, num_joints=n, window=t, edges=edges, reduction=2,
                         ablation=AblationConfig(use_ssf=False, ssf_strategy="T0"))
    torch.manual_seed(seed)
    net = HGLNet(cfg).double()
    gen = torch.Generator().manual_seed(seed)
    _randomize(net, gen)
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d)):
                mod.running_mean.normal_(0, 0.5, generator=gen)
                mod.running_var.uniform_(0.5, 2.0, generator=gen)
    x = torch.randn(1, 3, t, n, generator=gen, dtype=torch.float64)
    return net.eval(), x, physical_mask(edges, n)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))
