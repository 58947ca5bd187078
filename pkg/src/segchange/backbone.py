"""Siamese multi-scale encoders and the backbone registry."""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import RegistryError, ShapeError

STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    channel_widths: Tuple[int, int, int, int]
    seed: int = 0

    def __post_init__(self):
        if len(self.channel_widths) != 4 or any(int(c) <= 0 for c in self.channel_widths):
            raise ValueError(f"channel widths must be 4 positive ints, got {self.channel_widths}")


class FeaturePyramid(tuple):
    """Four feature maps (B, C_h, H/s_h, W/s_h) at strides 4, 8, 16, 32."""

    def __new__(cls, levels):
        levels = tuple(levels)
        if len(levels) != 4:
            raise ShapeError(f"a feature pyramid has exactly 4 levels, got {len(levels)}")
        return super().__new__(cls, levels)

    @property
    def channels(self):
        return tuple(f.shape[1] for f in self)

    def check(self, image_hw):
        h, w = image_hw
        for f, s in zip(self, STRIDES):
            if tuple(f.shape[-2:]) != (h // s, w // s):
                raise ShapeError(f"level at stride {s} has size {tuple(f.shape[-2:])}")
            if not torch.isfinite(f).all():
                raise ShapeError(f"level at stride {s} has non-finite values")
        return self


def conv_norm_act(cin, cout, stride):
    # GroupNorm(1, C) normalizes each sample on its own, so batch size never matters
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(1, cout),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Four stages of two conv-norm-relu blocks; stage 1 downsamples twice."""

    def __init__(self, channel_widths=(16, 32, 64, 128), in_channels=3):
        super().__init__()
        c1, c2, c3, c4 = channel_widths
        self.channel_widths = tuple(channel_widths)
        self.stages = nn.ModuleList([
            nn.Sequential(conv_norm_act(in_channels, c1, 2), conv_norm_act(c1, c1, 2)),
            nn.Sequential(conv_norm_act(c1, c2, 2), conv_norm_act(c2, c2, 1)),
            nn.Sequential(conv_norm_act(c2, c3, 2), conv_norm_act(c3, c3, 1)),
            nn.Sequential(conv_norm_act(c3, c4, 2), conv_norm_act(c4, c4, 1)),
        ])
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(levels)


_REGISTRY: Dict[str, Tuple[BackboneSpec, Callable]] = {}


def register_backbone(spec: BackboneSpec, factory: Callable[[Tuple[int, ...]], nn.Module]):
    if spec.name in _REGISTRY:
        raise RegistryError(f"backbone {spec.name!r} is already registered")
    _REGISTRY[spec.name] = (spec, factory)


def unregister_backbone(name: str):
    _REGISTRY.pop(name, None)


def registered_backbones() -> List[str]:
    return sorted(_REGISTRY)


def create_backbone(name: str, channel_widths: Optional[Sequence[int]] = None,
                    seed: Optional[int] = None) -> nn.Module:
    """Build a freshly initialized encoder; widths and seed default to the registered spec."""
    try:
        spec, factory = _REGISTRY[name]
    except KeyError:
        raise RegistryError(f"backbone {name!r} not found; known: {registered_backbones()}") from None
    widths = tuple(int(c) for c in (channel_widths or spec.channel_widths))
    BackboneSpec(name, widths)  # validates
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed if seed is None else seed)
        encoder = factory(widths)
    encoder.channel_widths = widths
    return encoder


def encode(encoder: nn.Module, image: torch.Tensor) -> FeaturePyramid:
    """Run ``encoder`` on a (B, 3, H, W) batch or a single H×W×3 array."""
    if not torch.is_tensor(image):
        image = torch.as_tensor(image)
    if image.ndim == 3 and image.shape[-1] == 3:
        image = image.permute(2, 0, 1).unsqueeze(0)
    if image.ndim != 4:
        raise ShapeError(f"expected (B, 3, H, W) or HxWx3 input, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"input size {h}x{w} is not divisible by 32")
    param = next(encoder.parameters(), None)
    if param is not None:
        image = image.to(param.dtype)
    return FeaturePyramid(encoder(image)).check((h, w))


register_backbone(BackboneSpec("tiny", (16, 32, 64, 128)), TinyBackbone)
