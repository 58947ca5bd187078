"""End-to-end change detector.

backbone (shared by both phases) -> BEV converter -> difference -> FPN
-> D-Projector (text) -> query decoder -> mask head.
"""
import torch
import torch.nn as nn

from .backbone import create_backbone
from .bev import BEVSpaceConverter
from .fuse import FPN, DifferenceModule
from .maskdec import DProjector, MaskHead, QueryDecoder


def _seeded(seed, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class SegChangeModel(nn.Module):
    def __init__(self, backbone="tiny", channels=(16, 32, 64, 128), backbone_seed=0,
                 bev_mode="additive_linear", attn_dim=16, bev_seed=0,
                 diff_channels=64, fpn_channels=64, num_queries=8, layers=2,
                 text_width=None, seed=0):
        super().__init__()
        self.backbone = create_backbone(backbone, channels, backbone_seed)
        channels = self.backbone.channel_widths
        self.bev = _seeded(bev_seed, lambda: BEVSpaceConverter(channels, bev_mode, attn_dim))
        self.difference = _seeded(seed, lambda: DifferenceModule(channels, diff_channels))
        self.fpn = _seeded(seed + 1, lambda: FPN(diff_channels, fpn_channels))
        self.decoder = _seeded(seed + 2, lambda: QueryDecoder(fpn_channels, num_queries, layers))
        self.head = _seeded(seed + 3, lambda: MaskHead(fpn_channels))
        # built last and under its own seed so the rest is identical with or without text
        self.d_projector = None
        if text_width:
            self.d_projector = _seeded(seed + 4, lambda: DProjector(text_width, fpn_channels))

    @classmethod
    def from_config(cls, cfg):
        return cls(
            backbone=cfg.backbone.name, channels=cfg.backbone.channels, backbone_seed=cfg.backbone.seed,
            bev_mode=cfg.bev.mode, attn_dim=cfg.bev.attn_dim, bev_seed=cfg.bev.seed,
            diff_channels=cfg.fuse.diff_channels, fpn_channels=cfg.fuse.fpn_channels,
            num_queries=cfg.decoder.num_queries, layers=cfg.decoder.layers,
            text_width=None if cfg.text.mode == "none" else cfg.text_width, seed=cfg.seed,
        )

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def other_parameters(self):
        ids = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def fused_features(self, t1, t2, bev_counter=None):
        p1, p2 = self.backbone(t1), self.backbone(t2)
        p1, p2 = self.bev(p1, p2, bev_counter)
        return self.fpn(self.difference(p1, p2))

    def forward(self, t1, t2, text=None, valid_length=None):
        """(B, 3, H, W) image pairs -> (B, H, W) change logits.

        ``text`` is (B, L, D_text) with per-sample ``valid_length``; when it
        is None (or the model has no text pathway) decoding is text-free.
        """
        fused = self.fused_features(t1, t2)
        if text is not None and self.d_projector is not None:
            fused = self.d_projector(fused, text, valid_length)
        queries, fmap = self.decoder(fused)
        return self.head(queries, fmap)
