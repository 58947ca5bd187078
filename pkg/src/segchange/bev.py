"""BEV space converter: shared latent projection plus additive attention over feature tokens.

Tokens are the positions of one pyramid level flattened row-major, shaped
(..., n, D). For every level:

    z_i    = W_z x_i + b_z
    s_ij   = w_a . relu(W_a1 z_i + W_a2 z_j)
    A_i.   = softmax_j(s_ij)
    out_i  = z_i + W_out sum_j A_ij z_j

``additive_linear`` avoids the n x n score matrix by scoring each token once
against a global context vector (see :func:`convert_linear`).
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import ContractError, ShapeError

MODES = ("none", "transformer", "additive_exact", "additive_linear")
INIT_STD = 0.02
ROW_SUM_TOL = 1e-4
# upper bound on elements of one (rows, n, D_a) pairwise block
_CHUNK_ELEMENTS = 1 << 22


@dataclass
class ScoreCounter:
    """Counts scalar attention-score evaluations made during a call."""

    count: int = 0

    def add(self, k):
        self.count += int(k)


class TokenGrid:
    """Row-major (h, w) grid of tokens stored as a (..., n, D) tensor."""

    def __init__(self, tokens: torch.Tensor, shape: Tuple[int, int]):
        h, w = shape
        if tokens.shape[-2] != h * w:
            raise ShapeError(f"{tokens.shape[-2]} tokens cannot form a {h}x{w} grid")
        self.tokens = tokens
        self.shape = (h, w)

    @classmethod
    def from_map(cls, fmap: torch.Tensor) -> "TokenGrid":
        # (B, C, h, w) -> (B, h*w, C)
        b, c, h, w = fmap.shape
        return cls(fmap.flatten(2).transpose(1, 2), (h, w))

    def to_map(self) -> torch.Tensor:
        h, w = self.shape
        b, n, d = self.tokens.shape
        return self.tokens.transpose(1, 2).reshape(b, d, h, w)

    @property
    def n(self):
        return self.tokens.shape[-2]

    @property
    def width(self):
        return self.tokens.shape[-1]


def _stable_softmax(scores):
    shifted = scores - scores.max(dim=-1, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


class BEVConverterParams(nn.Module):
    """Learnable parameters of one converter level.

    ``W_out`` mixes the aggregated context back into the tokens. In
    ``additive_linear`` mode it acts on the D_a-dimensional attention
    activation, so it is D x D_a there and D x D otherwise.
    """

    def __init__(self, d_in: int, d: int, attn_dim: int, mode: str = "additive_linear"):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown BEV mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.d_in, self.d, self.attn_dim = d_in, d, attn_dim
        if mode == "none":
            return
        self.W_z = nn.Parameter(torch.empty(d, d_in))
        self.b_z = nn.Parameter(torch.zeros(d))
        if mode in ("additive_exact", "additive_linear"):
            self.w_a = nn.Parameter(torch.empty(attn_dim))
            self.W_a1 = nn.Parameter(torch.empty(attn_dim, d))
            self.W_a2 = nn.Parameter(torch.empty(attn_dim, d))
            out_in = attn_dim if mode == "additive_linear" else d
            self.W_out = nn.Parameter(torch.empty(d, out_in))
        elif mode == "transformer":
            self.W_q = nn.Parameter(torch.empty(d, d))
            self.W_k = nn.Parameter(torch.empty(d, d))
            self.W_v = nn.Parameter(torch.empty(d, d))
        for name, p in self.named_parameters():
            if name != "b_z":
                nn.init.normal_(p, std=INIT_STD)


def project(params: BEVConverterParams, x: TokenGrid) -> TokenGrid:
    if x.width != params.d_in:
        raise ShapeError(f"token width {x.width} does not match W_z input width {params.d_in}")
    return TokenGrid(x.tokens @ params.W_z.T + params.b_z, x.shape)


def attention_scores(params, z: TokenGrid, counter: Optional[ScoreCounter] = None):
    """Raw n x n additive scores, built in row blocks to bound memory."""
    t = z.tokens
    a = t @ params.W_a1.T  # (..., n, D_a)
    b = t @ params.W_a2.T
    n, da = a.shape[-2], a.shape[-1]
    rows = max(1, _CHUNK_ELEMENTS // max(1, n * da))
    blocks = []
    for start in range(0, n, rows):
        pair = torch.relu(a[..., start:start + rows, None, :] + b[..., None, :, :])
        blocks.append(pair @ params.w_a)
    if counter is not None:
        counter.add(t[..., 0, 0].numel() * n * n)
    return torch.cat(blocks, dim=-2)


def attention_exact(params, z: TokenGrid, counter: Optional[ScoreCounter] = None) -> torch.Tensor:
    """Row-stochastic n x n attention from the pairwise additive scores."""
    return _stable_softmax(attention_scores(params, z, counter))


def aggregate(A: torch.Tensor, z: TokenGrid, W_out: torch.Tensor, check: bool = True) -> TokenGrid:
    """Residual aggregation ``out_i = z_i + W_out sum_j A_ij z_j``."""
    if A.shape[-1] != z.n or A.shape[-2] != z.n:
        raise ShapeError(f"attention shape {tuple(A.shape)} does not match {z.n} tokens")
    if check:
        dev = (A.sum(dim=-1) - 1).abs().max().item() if A.numel() else 0.0
        if dev > ROW_SUM_TOL or (A < 0).any():
            raise ContractError(f"attention matrix is not row-stochastic (max row-sum error {dev:.3g})")
    return TokenGrid(z.tokens + (A @ z.tokens) @ W_out.T, z.shape)


def linear_weights(params, z: TokenGrid, counter: Optional[ScoreCounter] = None) -> torch.Tensor:
    """Softmax weights over tokens from one score per token, shape (..., n)."""
    s = torch.relu(z.tokens @ params.W_a2.T) @ params.w_a
    if counter is not None:
        counter.add(s.numel())
    return _stable_softmax(s)


def convert_linear(params, z: TokenGrid, counter: Optional[ScoreCounter] = None) -> TokenGrid:
    """Linear-cost variant of the additive converter.

    The key side of each pairwise score is replaced by a single global context
    ``g = sum_j alpha_j z_j`` where ``alpha = softmax_j(w_a . relu(W_a2 z_j))``.
    Each token then reads ``W_out relu(W_a1 z_i + W_a2 g)``. Only O(n D) memory
    is used and exactly n scores are evaluated.
    """
    alpha = linear_weights(params, z, counter)
    g = (alpha.unsqueeze(-2) @ z.tokens)  # (..., 1, D)
    h = torch.relu(z.tokens @ params.W_a1.T + g @ params.W_a2.T)
    return TokenGrid(z.tokens + h @ params.W_out.T, z.shape)


def transformer_weights(params, z: TokenGrid, counter: Optional[ScoreCounter] = None):
    q = z.tokens @ params.W_q.T
    k = z.tokens @ params.W_k.T
    s = (q @ k.transpose(-1, -2)) / math.sqrt(z.width)
    if counter is not None:
        counter.add(s.numel())
    return _stable_softmax(s)


def convert_transformer(params, z: TokenGrid, counter: Optional[ScoreCounter] = None) -> TokenGrid:
    A = transformer_weights(params, z, counter)
    return TokenGrid(z.tokens + A @ (z.tokens @ params.W_v.T), z.shape)


def convert_tokens(params, x: TokenGrid, counter: Optional[ScoreCounter] = None) -> TokenGrid:
    """Apply one level's converter to a token grid according to ``params.mode``."""
    if params.mode == "none":
        return x
    z = project(params, x)
    if params.mode == "transformer":
        return convert_transformer(params, z, counter)
    if params.mode == "additive_exact":
        return aggregate(attention_exact(params, z, counter), z, params.W_out, check=False)
    return convert_linear(params, z, counter)


class BEVSpaceConverter(nn.Module):
    """Per-level converters shared by both time phases."""

    def __init__(self, channels: Sequence[int], mode: str = "additive_linear", attn_dim: int = 16):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown BEV mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.channels = tuple(channels)
        self.levels = nn.ModuleList(
            [BEVConverterParams(c, c, attn_dim, mode) for c in channels]
        )

    def convert_level(self, i, fmap, counter=None):
        return convert_tokens(self.levels[i], TokenGrid.from_map(fmap), counter).to_map()

    def forward(self, p1, p2, counter: Optional[ScoreCounter] = None):
        if len(p1) != len(p2):
            raise ShapeError("pyramids have different numbers of levels")
        for f1, f2 in zip(p1, p2):
            if f1.shape != f2.shape:
                raise ShapeError(f"level shapes differ between phases: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        if self.mode == "none":
            return p1, p2
        out1 = [self.convert_level(i, f, counter) for i, f in enumerate(p1)]
        out2 = [self.convert_level(i, f, counter) for i, f in enumerate(p2)]
        return type(p1)(out1), type(p2)(out2)


def convert(converter: BEVSpaceConverter, p1, p2, counter: Optional[ScoreCounter] = None):
    return converter(p1, p2, counter)
