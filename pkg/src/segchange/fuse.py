"""Temporal difference module and top-down FPN fusion."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


class DifferenceModule(nn.Module):
    """Per level: ``relu(conv1x1([|f1 - f2|; f1 + f2]))``.

    Both halves of the concatenation are symmetric in (f1, f2), so swapping
    the phases gives a bit-identical result.
    """

    def __init__(self, in_channels, diff_channels=64):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(2 * c, diff_channels, 1) for c in in_channels)
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    def forward(self, p1, p2):
        if len(p1) != len(self.convs) or len(p2) != len(self.convs):
            raise ShapeError(f"expected {len(self.convs)} pyramid levels")
        out = []
        for conv, f1, f2 in zip(self.convs, p1, p2):
            if f1.shape != f2.shape:
                raise ShapeError(f"level shape mismatch {tuple(f1.shape)} vs {tuple(f2.shape)}")
            out.append(F.relu(conv(torch.cat([(f1 - f2).abs(), f1 + f2], dim=1))))
        return out


class FPN(nn.Module):
    """Lateral 1x1 convs, nearest x2 top-down additions, 3x3 smoothing at stride 4."""

    def __init__(self, diff_channels=64, fpn_channels=64, levels=4):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(diff_channels, fpn_channels, 1) for _ in range(levels))
        self.smooth = nn.Conv2d(fpn_channels, fpn_channels, 3, padding=1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=1)
                nn.init.zeros_(m.bias)

    def forward(self, levels):
        x = self.lateral[-1](levels[-1])
        for i in range(len(levels) - 2, -1, -1):
            lat = self.lateral[i](levels[i])
            up = F.interpolate(x, scale_factor=2, mode="nearest")
            if up.shape[-2:] != lat.shape[-2:]:
                raise ShapeError(f"level {i} size {tuple(lat.shape[-2:])} is not twice the coarser level")
            x = lat + up
        return self.smooth(x)


def difference(p1, p2, module: DifferenceModule):
    return module(p1, p2)


def fpn_fuse(d, module: FPN):
    return module(d)
