"""Mask decoder: text projector, learnable-query transformer decoder and mask head."""
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class Attention(nn.Module):
    """Multi-head attention with an explicit key-validity mask.

    Query rows with no valid key read out exactly zero instead of NaN.
    """

    def __init__(self, dim, heads=1, kdim=None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        kdim = kdim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kdim, dim)
        self.v = nn.Linear(kdim, dim)
        self.o = nn.Linear(dim, dim)
        for lin in (self.q, self.k, self.v, self.o):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, mem, key_valid=None):
        q, k, v = self._split(self.q(x)), self._split(self.k(mem)), self._split(self.v(mem))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        top = scores.amax(dim=-1, keepdim=True)
        top = torch.where(torch.isfinite(top), top, torch.zeros_like(top))
        e = torch.exp(scores - top)
        denom = e.sum(dim=-1, keepdim=True)
        w = e / torch.where(denom > 0, denom, torch.ones_like(denom))
        out = (w @ v).transpose(1, 2).reshape(x.shape)
        out = self.o(out)
        if key_valid is not None:
            out = out * key_valid.any(dim=-1)[:, None, None].to(out.dtype)
        return out


class DProjector(nn.Module):
    """Adapts text width to the visual width and lets each pixel read the text tokens."""

    def __init__(self, text_width, dim):
        super().__init__()
        self.adapter = nn.Linear(text_width, dim)
        self.attn = Attention(dim, heads=1)

    def forward(self, fmap, text=None, valid_length=None):
        """``fmap`` (B, C, h, w); ``text`` (B, L, D_text); ``valid_length`` (B,)."""
        if text is None:
            return fmap
        b, c, h, w = fmap.shape
        tokens = fmap.flatten(2).transpose(1, 2)
        keys = self.adapter(text)
        pos = torch.arange(text.shape[1], device=text.device)
        valid = pos[None, :] < valid_length[:, None]
        tokens = tokens + self.attn(tokens, keys, valid)
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class DecoderLayer(nn.Module):
    """Pre-norm: query self-attention, query-to-pixel cross-attention, feed-forward."""

    def __init__(self, dim, heads=1, ffn_mult=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.ReLU(), nn.Linear(ffn_mult * dim, dim))
        for m in self.ffn:
            if isinstance(m, nn.Linear):
                nn.init.zeros_(m.bias)

    def forward(self, q, mem):
        x = self.norm1(q)
        q = q + self.self_attn(x, x)
        q = q + self.cross_attn(self.norm2(q), mem)
        return q + self.ffn(self.norm3(q))


class QueryDecoder(nn.Module):
    def __init__(self, dim, num_queries=8, layers=2, heads=1):
        super().__init__()
        if layers < 1 or num_queries < 1:
            raise ValueError("decoder needs at least one layer and one query")
        self.queries = nn.Parameter(torch.randn(num_queries, dim))
        self.layers = nn.ModuleList(DecoderLayer(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, fmap, queries=None):
        """Refine queries against ``fmap``; the map itself is returned unchanged."""
        b = fmap.shape[0]
        q = self.queries if queries is None else queries
        if q.ndim == 2:
            q = q.unsqueeze(0).expand(b, -1, -1)
        mem = fmap.flatten(2).transpose(1, 2)
        for layer in self.layers:
            q = layer(q, mem)
        return self.norm(q), fmap


class SEBlock(nn.Module):
    """Squeeze-excitation: global average pool, bottleneck, sigmoid channel gate."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        s = x.mean(dim=(2, 3), keepdim=True)
        return x * torch.sigmoid(self.fc2(F.relu(self.fc1(s))))


class MaskHead(nn.Module):
    """Per-query dot-product masks, max over queries, conv + SE refinement, x4 upsample."""

    def __init__(self, dim, refine_channels=16, upsample=4):
        super().__init__()
        self.mask_embed = nn.Linear(dim, dim)
        self.refine = nn.Sequential(
            nn.Conv2d(1, refine_channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(refine_channels, refine_channels, 3, padding=1),
            nn.ReLU(),
            SEBlock(refine_channels),
            nn.Conv2d(refine_channels, 1, 1),
        )
        self.upsample = upsample

    def query_masks(self, queries, fmap):
        return torch.einsum("bqc,bchw->bqhw", self.mask_embed(queries), fmap)

    def forward(self, queries, fmap):
        combined = self.query_masks(queries, fmap).amax(dim=1, keepdim=True)
        x = combined + self.refine(combined)
        # align_corners=False: output pixel centers map to (i + 0.5) / 4 - 0.5 in
        # the stride-4 grid, clamped at the border (edges replicate the outer cell)
        x = F.interpolate(x, scale_factor=self.upsample, mode="bilinear", align_corners=False)
        return x[:, 0]


def d_project(visual, text, valid_length, module: DProjector):
    return module(visual, text, valid_length)


def decode(fused, decoder: QueryDecoder, queries=None):
    return decoder(fused, queries)


def predict_mask(queries, fmap, head: MaskHead):
    return head(queries, fmap)


def binarize(logits, threshold=0.5):
    """1 where sigmoid(logit) >= threshold (the boundary counts as change)."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if torch.is_tensor(logits):
        return (torch.sigmoid(logits) >= threshold).to(torch.uint8)
    logits = np.asarray(logits, dtype=np.float64)
    with np.errstate(over="ignore"):
        return (1.0 / (1.0 + np.exp(-logits)) >= threshold).astype(np.uint8)
