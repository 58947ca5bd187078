import pytest
import torch
import torch.nn.functional as F

from oracles import gradient_errors
from segchange.backbone import FeaturePyramid
from segchange.errors import ShapeError
from segchange.fuse import FPN, DifferenceModule, difference, fpn_fuse

CH = (3, 4, 5, 6)


def pyramid(seed, size=64, channels=CH, batch=1):
    g = torch.Generator().manual_seed(seed)
    return FeaturePyramid(
        torch.randn(batch, c, size // s, size // s, generator=g, dtype=torch.float64)
        for c, s in zip(channels, (4, 8, 16, 32))
    )


@pytest.fixture
def diff():
    torch.manual_seed(0)
    return DifferenceModule(CH, 7).double()


@pytest.fixture
def fpn():
    torch.manual_seed(0)
    return FPN(7, 5).double()


def test_equal_inputs_zero_abs_half(diff):
    p = pyramid(0)
    captured = []
    hooks = [c.register_forward_hook(lambda m, inp, out: captured.append(inp[0])) for c in diff.convs]
    difference(p, p, diff)
    for h in hooks:
        h.remove()
    for x, c in zip(captured, CH):
        assert torch.count_nonzero(x[:, :c]) == 0


def test_swap_symmetric_bitwise(diff):
    p1, p2 = pyramid(1), pyramid(2)
    for a, b in zip(difference(p1, p2, diff), difference(p2, p1, diff)):
        assert torch.equal(a, b)


def test_difference_composition_oracle(diff):
    p1, p2 = pyramid(3, size=32), pyramid(4, size=32)
    out = difference(p1, p2, diff)
    for level, (f1, f2, o) in enumerate(zip(p1, p2, out)):
        conv = diff.convs[level]
        W = conv.weight[:, :, 0, 0]
        x = torch.cat([(f1 - f2).abs(), f1 + f2], dim=1)
        manual = torch.relu(torch.einsum("oc,bchw->bohw", W, x) + conv.bias[None, :, None, None])
        torch.testing.assert_close(o, manual, rtol=0, atol=1e-12)


def test_difference_shape_mismatch(diff):
    with pytest.raises(ShapeError):
        difference(pyramid(0, 64), pyramid(1, 32), diff)


def test_fpn_zero_in_zero_out(fpn):
    zeros = [torch.zeros(1, 7, 16 // 2 ** i, 16 // 2 ** i, dtype=torch.float64) for i in range(4)]
    assert torch.count_nonzero(fpn_fuse(zeros, fpn)) == 0


def test_fpn_stride_four(diff, fpn):
    fused = fpn_fuse(difference(pyramid(0, 64), pyramid(1, 64), diff), fpn)
    assert fused.shape == (1, 5, 16, 16)


def test_fpn_impulse_support(fpn):
    levels = [torch.zeros(1, 7, 16 // 2 ** i, 16 // 2 ** i, dtype=torch.float64) for i in range(4)]
    levels[3][0, 2, 1, 0] = 1.0  # coarsest grid is 2x2
    out = fpn_fuse(levels, fpn)
    nz = out.abs().sum(1)[0] != 0
    # the cell covers rows 8..15, cols 0..7 at stride 4; the 3x3 smoothing grows it by one
    allowed = torch.zeros(16, 16, dtype=torch.bool)
    allowed[7:16, 0:9] = True
    assert nz.any()
    assert not (nz & ~allowed).any()
    assert nz[8:16, 0:8].all()


def test_gradient_check_difference_fpn():
    torch.manual_seed(5)
    diff = DifferenceModule((2, 3, 2, 2), 3).double()
    fpn = FPN(3, 2).double()
    with torch.no_grad():
        for p in list(diff.parameters()) + list(fpn.parameters()):
            p.normal_(0, 0.5)
    p1, p2 = pyramid(6, size=32, channels=(2, 3, 2, 2)), pyramid(7, size=32, channels=(2, 3, 2, 2))
    w = torch.randn(1, 2, 8, 8, dtype=torch.float64)

    def objective():
        return (fpn(diff(p1, p2)) * w).sum()

    named = [("diff." + n, p) for n, p in diff.named_parameters()]
    named += [("fpn." + n, p) for n, p in fpn.named_parameters()]
    errors = gradient_errors(objective, named)
    assert max(errors.values()) < 1e-4, errors
