"""Learnable networks: uni-modal encoders/decoders, A2V/V2A converters,
per-modality WGAN critics and the stage-2 classifier."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig, derive_geometry
from .masking import fuse, gather_slices, visible_slices
from .tokenizer import ShapeError, patchify_audio, patchify_visual

MODALITIES = ("a", "v")


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block, GELU MLP with ratio 4."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, patch_dim: int, n_tokens: int, dim: int, depth: int, heads: int):
        super().__init__()
        self.patch_embed = nn.Linear(patch_dim, dim)
        self.pos = nn.Parameter(torch.zeros(n_tokens, dim))
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(tokens) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class CrossModalConverter(nn.Module):
    """A2V / V2A: per slice, a linear map over the token axis
    (``src`` tokens -> ``dst`` tokens, shared by all slices) then one block."""

    def __init__(self, src_tokens: int, dst_tokens: int, dim: int, heads: int):
        super().__init__()
        self.adapter = nn.Linear(src_tokens, dst_tokens)
        self.block = Block(dim, heads)

    def forward(self, slices: torch.Tensor) -> torch.Tensor:
        """``(B, n, src, d)`` -> ``(B, n, dst, d)``; slice order is preserved."""
        b, n, _, d = slices.shape
        x = self.adapter(slices.transpose(-1, -2)).transpose(-1, -2)
        x = self.block(x.reshape(b * n, -1, d))
        return x.reshape(b, n, -1, d)


class Decoder(nn.Module):
    def __init__(self, n_tokens: int, in_dim: int, dim: int, depth: int, heads: int, patch_dim: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, dim)
        self.pos = nn.Parameter(torch.zeros(n_tokens, dim))
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, patch_dim)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        x = self.proj(fused) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))


class Critic(nn.Module):
    """WGAN critic: per-token 2-layer MLP score averaged over the given tokens."""

    def __init__(self, patch_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(patch_dim, hidden), nn.GELU(), nn.Linear(hidden, 1))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-2] == 0:
            raise ValueError("critic needs at least one token per sample")
        return self.net(tokens).squeeze(-1).mean(dim=-1)

    @torch.no_grad()
    def clip_(self, bound: float) -> None:
        for p in self.parameters():
            p.clamp_(-bound, bound)


class PatchReduction(nn.Module):
    """Collapse ``(B, N, d)`` to ``(B, d)``: per-token 3-layer MLP then a
    learned softmax-weighted mean over tokens. ``mean_pool`` swaps in a plain
    token average (no parameters)."""

    def __init__(self, dim: int, mean_pool: bool = False):
        super().__init__()
        self.mean_pool = mean_pool
        if not mean_pool:
            self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim), nn.GELU(),
                                     nn.Linear(dim, dim))
            self.score = nn.Linear(dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mean_pool:
            return x.mean(dim=-2)
        h = self.mlp(x)
        w = torch.softmax(self.score(h), dim=-2)
        return (w * h).sum(dim=-2)


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, hidden: int, n_classes: int = 2):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, n_classes))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@dataclass
class EmbeddingBundle:
    a: torch.Tensor
    v: torch.Tensor
    a_v: torch.Tensor | None = None
    v_a: torch.Tensor | None = None
    a_fused: torch.Tensor | None = None
    v_fused: torch.Tensor | None = None
    f_a: torch.Tensor | None = None
    f_v: torch.Tensor | None = None
    slices_a: torch.Tensor | None = None
    slices_v: torch.Tensor | None = None


FEATURE_MODES = ("both", "features", "cross")


class AVFF(nn.Module):
    """All parameters of both stages.

    ``feature_mode`` picks what the classifier sees per modality: ``"both"``
    (embedding concatenated with its cross-modal counterpart), ``"features"``
    (uni-modal embedding only) or ``"cross"`` (cross-modal embedding only).
    """

    GENERATOR = ("enc_a", "enc_v", "a2v", "v2a", "dec_a", "dec_v", "mask_token_a", "mask_token_v")
    CRITIC = ("critic_a", "critic_v")
    BACKBONE = ("enc_a", "enc_v", "a2v", "v2a")
    HEADS = ("psi_a", "psi_v", "head")

    def __init__(self, cfg: ModelConfig, feature_mode: str = "both", mean_pool: bool = False):
        super().__init__()
        if feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
        self.cfg = cfg
        self.geo = geo = derive_geometry(cfg)
        self.feature_mode = feature_mode
        d, heads = cfg.encoder_dim, cfg.num_heads
        self.enc_a = Encoder(geo.patch_dim_audio, geo.audio_tokens_total, d, cfg.encoder_layers, heads)
        self.enc_v = Encoder(geo.patch_dim_visual, geo.visual_tokens_total, d, cfg.encoder_layers, heads)
        self.a2v = CrossModalConverter(geo.audio_tokens_per_slice, geo.visual_tokens_per_slice, d, heads)
        self.v2a = CrossModalConverter(geo.visual_tokens_per_slice, geo.audio_tokens_per_slice, d, heads)
        self.dec_a = Decoder(geo.audio_tokens_total, d, cfg.decoder_dim, cfg.decoder_layers, heads,
                             geo.patch_dim_audio)
        self.dec_v = Decoder(geo.visual_tokens_total, d, cfg.decoder_dim, cfg.decoder_layers, heads,
                             geo.patch_dim_visual)
        self.mask_token_a = nn.Parameter(torch.zeros(d))
        self.mask_token_v = nn.Parameter(torch.zeros(d))
        self.critic_a = Critic(geo.patch_dim_audio, cfg.critic_hidden)
        self.critic_v = Critic(geo.patch_dim_visual, cfg.critic_hidden)
        feat = 2 * d if feature_mode == "both" else d
        self.psi_a = PatchReduction(feat, mean_pool)
        self.psi_v = PatchReduction(feat, mean_pool)
        self.head = ClassifierHead(2 * feat, cfg.head_hidden)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # transformer parts: small truncated-normal weights; the stacked MLP
        # heads get fan-in scaled weights so their output does not vanish
        mlp_heads = set(self.CRITIC + self.HEADS)
        for name, m in self.named_modules():
            if isinstance(m, nn.Linear):
                if name.split(".")[0] in mlp_heads:
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                else:
                    nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        for name, p in self.named_parameters():
            if name.endswith(".pos"):
                nn.init.zeros_(p)
        nn.init.trunc_normal_(self.mask_token_a, std=0.02)
        nn.init.trunc_normal_(self.mask_token_v, std=0.02)

    # -- parameter groups ---------------------------------------------------
    def group(self, prefixes: tuple[str, ...]) -> Iterator[tuple[str, nn.Parameter]]:
        for name, p in self.named_parameters():
            if name.split(".")[0] in prefixes:
                yield name, p

    def parameters_of(self, prefixes: tuple[str, ...]) -> list[nn.Parameter]:
        return [p for _, p in self.group(prefixes)]

    # -- operations -----------------------------------------------------------
    def tokenize(self, audio: torch.Tensor, visual: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return patchify_audio(audio, self.cfg)[0], patchify_visual(visual, self.cfg)[0]

    def encode(self, tokens: torch.Tensor, modality: str) -> torch.Tensor:
        geo = self.geo
        n, pd = ((geo.audio_tokens_total, geo.patch_dim_audio) if modality == "a"
                 else (geo.visual_tokens_total, geo.patch_dim_visual))
        if tuple(tokens.shape[-2:]) != (n, pd):
            raise ShapeError(f"encode[{modality}]: expected (..., {n}, {pd}), got {tuple(tokens.shape)}")
        return (self.enc_a if modality == "a" else self.enc_v)(tokens)

    def convert(self, slices: torch.Tensor, direction: str) -> torch.Tensor:
        """Cross-modal conversion of ``(B, n, tokens_per_slice, d)`` slices."""
        if direction not in ("A2V", "V2A"):
            raise ValueError(f"direction must be 'A2V' or 'V2A', got {direction!r}")
        net = self.a2v if direction == "A2V" else self.v2a
        expected = net.adapter.in_features
        if slices.shape[-2] != expected or slices.shape[-1] != self.cfg.encoder_dim:
            raise ShapeError(f"{direction}: expected (..., {expected}, {self.cfg.encoder_dim}), "
                             f"got {tuple(slices.shape)}")
        return net(slices)

    def decode(self, fused: torch.Tensor, modality: str) -> torch.Tensor:
        n = self.geo.audio_tokens_total if modality == "a" else self.geo.visual_tokens_total
        if tuple(fused.shape[-2:]) != (n, self.cfg.encoder_dim):
            raise ShapeError(f"decode[{modality}]: expected (..., {n}, {self.cfg.encoder_dim}), "
                             f"got {tuple(fused.shape)}")
        return (self.dec_a if modality == "a" else self.dec_v)(fused)

    def discriminate(self, tokens: torch.Tensor, modality: str) -> torch.Tensor:
        return (self.critic_a if modality == "a" else self.critic_v)(tokens)

    def mask_and_fuse(self, a: torch.Tensor, v: torch.Tensor, mask_a: torch.Tensor, mask_v: torch.Tensor,
                      cross_modal: bool = True, allow_fill: bool = False) -> EmbeddingBundle:
        """Stage-1 path from encoder outputs to fused sequences ``a'``, ``v'``.

        With ``cross_modal`` the visible slices of each modality go through
        A2V/V2A and replace the masked slices of the other; otherwise masked
        slices take a shared learnable mask token. ``allow_fill`` lets masked
        slices that the other modality also masked fall back to the token.
        """
        k = self.cfg.num_slices
        b = a.shape[0]
        vis_a, vis_v = visible_slices(mask_a), visible_slices(mask_v)
        if cross_modal:
            v_a = self.convert(gather_slices(a, vis_a, k), "A2V")
            a_v = self.convert(gather_slices(v, vis_v, k), "V2A")
            fill_a = self.mask_token_a if allow_fill else None
            fill_v = self.mask_token_v if allow_fill else None
            a_fused = fuse(a, mask_a, a_v, vis_v, k, fill_a)
            v_fused = fuse(v, mask_v, v_a, vis_a, k, fill_v)
        else:
            empty = torch.zeros(b, 0, dtype=torch.long)
            a_v = v_a = None
            a_fused = fuse(a, mask_a, a.new_zeros(b, 0, 1, a.shape[-1]), empty, k, self.mask_token_a)
            v_fused = fuse(v, mask_v, v.new_zeros(b, 0, 1, v.shape[-1]), empty, k, self.mask_token_v)
        return EmbeddingBundle(a=a, v=v, a_v=a_v, v_a=v_a, a_fused=a_fused, v_fused=v_fused,
                               slices_a=vis_v, slices_v=vis_a)

    def cross_all(self, a: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Unmasked cross-modal embeddings ``(a_v, v_a)`` for every slice."""
        k, b, d = self.cfg.num_slices, a.shape[0], a.shape[-1]
        v_a = self.convert(a.reshape(b, k, -1, d), "A2V").reshape(b, -1, d)
        a_v = self.convert(v.reshape(b, k, -1, d), "V2A").reshape(b, -1, d)
        return a_v, v_a

    def features(self, a: torch.Tensor, v: torch.Tensor) -> EmbeddingBundle:
        a_v = v_a = None
        if self.feature_mode == "features":
            f_a, f_v = a, v
        else:
            a_v, v_a = self.cross_all(a, v)
            if self.feature_mode == "cross":
                f_a, f_v = a_v, v_a
            else:
                f_a, f_v = torch.cat([a, a_v], dim=-1), torch.cat([v, v_a], dim=-1)
        return EmbeddingBundle(a=a, v=v, a_v=a_v, v_a=v_a, f_a=f_a, f_v=f_v)

    def classify(self, f_a: torch.Tensor, f_v: torch.Tensor) -> torch.Tensor:
        width = 2 * self.cfg.encoder_dim if self.feature_mode == "both" else self.cfg.encoder_dim
        if f_a.shape[-1] != width or f_v.shape[-1] != width:
            raise ShapeError(f"classify: expected feature dim {width}, got {f_a.shape[-1]} / {f_v.shape[-1]}")
        return self.head(torch.cat([self.psi_a(f_a), self.psi_v(f_v)], dim=-1))

    def forward(self, audio: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
        """Stage-2 logits ``(B, 2)`` from normalised audio/visual clips."""
        x_a, x_v = self.tokenize(audio, visual)
        bundle = self.features(self.encode(x_a, "a"), self.encode(x_v, "v"))
        return self.classify(bundle.f_a, bundle.f_v)

    def embed(self, audio: torch.Tensor, visual: torch.Tensor) -> EmbeddingBundle:
        x_a, x_v = self.tokenize(audio, visual)
        a, v = self.encode(x_a, "a"), self.encode(x_v, "v")
        a_v, v_a = self.cross_all(a, v)
        return EmbeddingBundle(a=a, v=v, a_v=a_v, v_a=v_a, f_a=torch.cat([a, a_v], -1),
                               f_v=torch.cat([v, v_a], -1))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
