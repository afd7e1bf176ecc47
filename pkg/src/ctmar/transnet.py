"""Stage-2 modality translation: dual-path 3D encoding with a gated decoder.

A residual CNN branch captures local anatomy while a patch-token transformer
branch models long-range context; the two feature volumes are merged by a
spatial+channel attention fusion and decoded through three attention-gated
upsampling stages, each with its own prediction head for multi-scale
supervision. Depth is never downsampled; all strides act in-plane only.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError

# Reference design target for the full-scale parameter budget (millions).
REFERENCE_FULL_SCALE_PARAMS = 22_600_000

PATCH_H = 8
PATCH_W = 8


@dataclass(frozen=True)
class TransNetSpec:
    """Architecture hyperparameters; `full_scale`/`desk_scale` build presets."""

    depth: int = 3
    height: int = 64
    width: int = 64
    encoder_widths: tuple[int, int, int] = (64, 128, 256)
    blocks_per_level: int = 3
    trans_dim: int = 256
    trans_heads: int = 8
    trans_layers: int = 4
    trans_mlp_ratio: int = 4
    decoder_widths: tuple[int, int, int] = (128, 64, 32)
    head_width: int = 32
    channel_reduction: int = 16
    use_transformer: bool = True
    fusion: str = "dual"  # dual | concat | none
    fusion_literal: bool = False
    attention_gates: bool = True

    def validate(self) -> None:
        if self.height % 8 or self.width % 8:
            raise ConfigError(f"H and W must be divisible by 8, got ({self.height}, {self.width})")
        if self.fusion not in ("dual", "concat", "none"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.fusion != "none" and not self.use_transformer:
            raise ConfigError("fusion requires the transformer branch")
        if self.trans_dim % self.trans_heads:
            raise ConfigError("trans_dim must divide evenly into heads")

    @property
    def n_tokens(self) -> int:
        return self.depth * (self.height // PATCH_H) * (self.width // PATCH_W)


def full_scale(depth: int = 3, height: int = 512, width: int = 512, **kw) -> TransNetSpec:
    return TransNetSpec(depth=depth, height=height, width=width, **kw)


def desk_scale(depth: int = 3, height: int = 64, width: int = 64, **kw) -> TransNetSpec:
    """Small widths for CPU-friendly training runs; same topology as full scale."""
    defaults = dict(
        encoder_widths=(16, 32, 64),
        trans_dim=64,
        trans_heads=4,
        decoder_widths=(32, 16, 8),
        head_width=8,
        channel_reduction=4,
    )
    defaults.update(kw)
    return TransNetSpec(depth=depth, height=height, width=width, **defaults)


class ResidualBlock3d(nn.Module):
    """Identity-shortcut block: x + conv(act(conv(x))); tail conv zero-init."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.act = nn.ReLU(inplace=True)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def branch(self, x):
        return self.conv2(self.act(self.conv1(x)))

    def forward(self, x):
        return x + self.branch(x)


class CnnEncoder(nn.Module):
    """Three levels of residual blocks with in-plane stride-2 downsampling."""

    def __init__(self, spec: TransNetSpec):
        super().__init__()
        w1, w2, w3 = spec.encoder_widths
        self.stem = nn.Sequential(nn.Conv3d(1, w1, 3, padding=1), nn.ReLU(inplace=True))
        self.levels = nn.ModuleList(
            nn.Sequential(*[ResidualBlock3d(c) for _ in range(spec.blocks_per_level)])
            for c in (w1, w2, w3)
        )
        self.downs = nn.ModuleList(
            nn.Conv3d(cin, cout, 3, stride=(1, 2, 2), padding=1)
            for cin, cout in ((w1, w2), (w2, w3), (w3, w3))
        )
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ConfigError(f"H and W must be divisible by 8, got {tuple(x.shape[-2:])}")
        h = self.stem(x)
        skips = []
        for level, down in zip(self.levels, self.downs):
            h = level(h)
            skips.append(h)
            h = self.act(down(h))
        return h, skips


def patchify(x: torch.Tensor) -> torch.Tensor:
    """(B,C,D,H,W) -> token matrix (B, N, C*64), depth-major then row-major."""
    bsz, c, d, h, w = x.shape
    hp, wp = h // PATCH_H, w // PATCH_W
    t = x.reshape(bsz, c, d, hp, PATCH_H, wp, PATCH_W)
    t = t.permute(0, 2, 3, 5, 1, 4, 6)
    return t.reshape(bsz, d * hp * wp, c * PATCH_H * PATCH_W)


def tokens_to_grid(tokens: torch.Tensor, d: int, hp: int, wp: int) -> torch.Tensor:
    """(B, N, C) token sequence back to a (B, C, D, hp, wp) feature grid."""
    bsz, n, c = tokens.shape
    if n != d * hp * wp:
        raise ConfigError(f"token count {n} does not tile ({d},{hp},{wp})")
    return tokens.reshape(bsz, d, hp, wp, c).permute(0, 4, 1, 2, 3)


def unpatchify(tokens: torch.Tensor, c: int, d: int, h: int, w: int) -> torch.Tensor:
    """Exact inverse of patchify: token matrix back to the voxel volume."""
    bsz = tokens.shape[0]
    hp, wp = h // PATCH_H, w // PATCH_W
    t = tokens.reshape(bsz, d, hp, wp, c, PATCH_H, PATCH_W)
    return t.permute(0, 4, 1, 2, 5, 3, 6).reshape(bsz, c, d, h, w)


class TransformerLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class PatchTransformerEncoder(nn.Module):
    """Non-overlapping (1,8,8) patches -> embedded tokens -> 4 pre-norm layers."""

    def __init__(self, spec: TransNetSpec):
        super().__init__()
        self.grid = (spec.depth, spec.height // PATCH_H, spec.width // PATCH_W)
        self.embed = nn.Linear(PATCH_H * PATCH_W, spec.trans_dim)
        self.pos_table = nn.Parameter(torch.empty(1, spec.n_tokens, spec.trans_dim))
        nn.init.trunc_normal_(self.pos_table, std=0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(spec.trans_dim, spec.trans_heads, spec.trans_mlp_ratio)
            for _ in range(spec.trans_layers)
        )
        self.out_proj = nn.Linear(spec.trans_dim, spec.encoder_widths[2])

    def encode_tokens(self, x: torch.Tensor) -> torch.Tensor:
        tokens = patchify(x)
        if tokens.shape[1] != self.pos_table.shape[1]:
            raise ConfigError(
                f"input tiles into {tokens.shape[1]} tokens but the positional "
                f"table holds {self.pos_table.shape[1]}"
            )
        z = self.embed(tokens) + self.pos_table
        for layer in self.layers:
            z = layer(z)
        return self.out_proj(z)

    def forward(self, x):
        d, hp, wp = self.grid
        return tokens_to_grid(self.encode_tokens(x), d, hp, wp)


class DualAttentionFusion(nn.Module):
    """Align concatenated streams, then gate spatially and channel-wise.

    Default semantics apply both attention maps as gates on the aligned
    feature `a`; `literal=True` instead multiplies the two attention outputs
    alone before the bottleneck (the alternative composition, kept switchable).
    """

    def __init__(self, channels: int, reduction: int = 16, literal: bool = False):
        super().__init__()
        self.literal = literal
        self.align = nn.Conv3d(2 * channels, channels, 1)
        self.spatial_conv = nn.Conv3d(2, 1, 7, padding=3)
        hidden = max(channels // reduction, 1)
        self.channel_fc = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
        )
        self.bottleneck = nn.Sequential(
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def spatial_attention(self, a: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([a.mean(dim=1, keepdim=True), a.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial_conv(pooled))

    def channel_attention(self, a: torch.Tensor) -> torch.Tensor:
        z = a.mean(dim=(-3, -2, -1))
        return torch.sigmoid(self.channel_fc(z))[:, :, None, None, None]

    def forward(self, f_r, f_t):
        if f_r.shape != f_t.shape:
            raise ConfigError(f"fusion inputs differ: {tuple(f_r.shape)} vs {tuple(f_t.shape)}")
        a = self.align(torch.cat([f_r, f_t], dim=1))
        s = self.spatial_attention(a)
        c = self.channel_attention(a)
        if self.literal:
            return self.bottleneck(s * c)
        return self.bottleneck(s * c * a)


class ConcatFusion(nn.Module):
    """Plain concatenation + pointwise projection (fusion-ablated variant)."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv3d(2 * channels, channels, 1)

    def forward(self, f_r, f_t):
        if f_r.shape != f_t.shape:
            raise ConfigError(f"fusion inputs differ: {tuple(f_r.shape)} vs {tuple(f_t.shape)}")
        return self.proj(torch.cat([f_r, f_t], dim=1))


class AttentionGate(nn.Module):
    """Additive attention over a skip: coefficient from (decoder, skip) pair."""

    def __init__(self, gate_ch: int, skip_ch: int):
        super().__init__()
        inter = max(skip_ch // 2, 1)
        self.w_gate = nn.Conv3d(gate_ch, inter, 1)
        self.w_skip = nn.Conv3d(skip_ch, inter, 1)
        self.psi = nn.Conv3d(inter, 1, 1)

    def forward(self, gate, skip):
        coeff = torch.sigmoid(self.psi(torch.relu(self.w_gate(gate) + self.w_skip(skip))))
        return skip * coeff, coeff


class PredictionHead(nn.Module):
    """In-plane 1x3x3 conv + GELU, Tanh squash, pointwise map to one channel."""

    def __init__(self, in_ch: int, hidden: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, hidden, (1, 3, 3), padding=(0, 1, 1))
        self.act = nn.GELU()
        self.out = nn.Conv3d(hidden, 1, 1)

    def forward(self, x):
        return self.out(torch.tanh(self.act(self.conv(x))))


class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, gated: bool):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_ch, out_ch, (1, 2, 2), stride=(1, 2, 2))
        self.gate = AttentionGate(out_ch, skip_ch) if gated else None
        self.refine = nn.Sequential(
            nn.Conv3d(out_ch + skip_ch, out_ch, 3, padding=1),
            nn.GELU(),
            nn.Conv3d(out_ch, out_ch, 3, padding=1),
            nn.GELU(),
        )
        self.skip_ch = skip_ch

    def forward(self, x, skip):
        up = self.up(x)
        if up.shape[-2:] != skip.shape[-2:] or skip.shape[1] != self.skip_ch:
            raise ConfigError(
                f"skip {tuple(skip.shape)} does not match stage output {tuple(up.shape)}"
            )
        if self.gate is not None:
            skip, _ = self.gate(up, skip)
        return self.refine(torch.cat([up, skip], dim=1))


class Decoder(nn.Module):
    """Three upsampling stages; every stage output feeds a prediction head."""

    def __init__(self, spec: TransNetSpec):
        super().__init__()
        w1, w2, w3 = spec.encoder_widths
        d1, d2, d3 = spec.decoder_widths
        self.stages = nn.ModuleList(
            [
                DecoderStage(w3, w3, d1, spec.attention_gates),
                DecoderStage(d1, w2, d2, spec.attention_gates),
                DecoderStage(d2, w1, d3, spec.attention_gates),
            ]
        )
        self.heads = nn.ModuleList(PredictionHead(c, spec.head_width) for c in (d1, d2, d3))

    def forward(self, bottleneck, skips_coarse_to_fine):
        if len(skips_coarse_to_fine) != len(self.stages):
            raise ConfigError("decoder needs exactly one skip per stage")
        preds = []
        h = bottleneck
        for stage, head, skip in zip(self.stages, self.heads, skips_coarse_to_fine):
            h = stage(h, skip)
            preds.append(head(h))
        return preds


class DomainTransNet(nn.Module):
    """Full stage-2 network; ablation switches select branches and fusion."""

    def __init__(self, spec: TransNetSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.cnn = CnnEncoder(spec)
        self.transformer = PatchTransformerEncoder(spec) if spec.use_transformer else None
        if spec.fusion == "dual":
            self.fuse = DualAttentionFusion(
                spec.encoder_widths[2], spec.channel_reduction, spec.fusion_literal
            )
        elif spec.fusion == "concat":
            self.fuse = ConcatFusion(spec.encoder_widths[2])
        else:
            self.fuse = None
        self.decoder = Decoder(spec)

    def forward(self, x):
        f_r, skips = self.cnn(x)
        if self.transformer is not None:
            f_t = self.transformer(x)
            f_f = self.fuse(f_r, f_t) if self.fuse is not None else f_r + f_t
        else:
            f_f = f_r
        return self.decoder(f_f, skips[::-1])


def count_parameters(*modules: nn.Module | None) -> int:
    """Total trainable scalars across the given modules (None entries skipped)."""
    seen: set[int] = set()
    total = 0
    for m in modules:
        if m is None:
            continue
        for p in m.parameters():
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                total += p.numel()
    return total


def perturb_parameters(module: nn.Module, seed: int, std: float = 0.05) -> None:
    """Add seeded Gaussian noise to every parameter (gradient-path probing).

    Zero-initialized residual tails block gradient flow to their upstream
    weights at exact init; nudging all parameters off zero restores the
    generic position that the gradient checks probe.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
