"""Edge-aware mask decoder.

Stage 1 runs a two-way transformer over image features and prompt tokens with one mask token
and one edge token, and reads coarse 1/4-resolution mask and edge logits through hypernetwork heads.
Stage 2 refines both predictions 1/8 -> 1/4 -> 1/2 -> 1/1 with residual blocks that see the image
and the previous prediction at every scale; a small head scores the final mask.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple, Type

import torch
import torch.nn.functional as F
from torch import nn

from sopseg.api import ShapeError
from sopseg.config import DecoderConfig
from sopseg.encoder import LayerNorm2d


def resize(x: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear, corner-aligned resize of a (B, C, H, W) map to (size, size)."""
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode='bilinear', align_corners=True)


class MLP(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int,
                 activation: Type[nn.Module] = nn.ReLU):
        super().__init__()
        self.num_layers = num_layers
        h = [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(n, k) for n, k in zip([input_dim] + h, h + [output_dim]))
        self.activation = activation()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = self.activation(layer(x)) if i < self.num_layers - 1 else layer(x)
        return x


class Attention(nn.Module):
    """Multi-head attention with an optional downscaled internal width."""

    def __init__(self, embedding_dim: int, num_heads: int, downsample_rate: int = 1):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.internal_dim = embedding_dim // downsample_rate
        self.num_heads = num_heads
        if self.internal_dim % num_heads != 0:
            raise ShapeError(f"Attention width {self.internal_dim} must be divisible by {num_heads} heads")
        self.q_proj = nn.Linear(embedding_dim, self.internal_dim)
        self.k_proj = nn.Linear(embedding_dim, self.internal_dim)
        self.v_proj = nn.Linear(embedding_dim, self.internal_dim)
        self.out_proj = nn.Linear(self.internal_dim, embedding_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        q = self._split(self.q_proj(q))
        k = self._split(self.k_proj(k))
        v = self._split(self.v_proj(v))
        head_dim = q.shape[-1]
        attn = torch.softmax((q @ k.transpose(-2, -1)) / head_dim ** 0.5, dim=-1)
        out = (attn @ v).transpose(1, 2)
        return self.out_proj(out.reshape(out.shape[0], out.shape[1], -1))


class TwoWayAttentionBlock(nn.Module):
    """Token self-attention, token-to-image attention, MLP, then image-to-token attention."""

    def __init__(self, embedding_dim: int, num_heads: int, mlp_dim: int, attention_downsample_rate: int = 2,
                 skip_first_layer_pe: bool = False):
        super().__init__()
        self.self_attn = Attention(embedding_dim, num_heads)
        self.norm1 = nn.LayerNorm(embedding_dim)
        self.cross_attn_token_to_image = Attention(embedding_dim, num_heads, attention_downsample_rate)
        self.norm2 = nn.LayerNorm(embedding_dim)
        self.mlp = MLP(embedding_dim, mlp_dim, embedding_dim, 2)
        self.norm3 = nn.LayerNorm(embedding_dim)
        self.norm4 = nn.LayerNorm(embedding_dim)
        self.cross_attn_image_to_token = Attention(embedding_dim, num_heads, attention_downsample_rate)
        self.skip_first_layer_pe = skip_first_layer_pe

    def forward(self, queries, keys, query_pe, key_pe) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.skip_first_layer_pe:
            queries = queries + self.self_attn(q=queries, k=queries, v=queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q=q, k=q, v=queries)
        queries = self.norm1(queries)

        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_attn_token_to_image(q=q, k=k, v=keys))
        queries = self.norm3(queries + self.mlp(queries))

        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_attn_image_to_token(q=k, k=q, v=queries))
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, depth: int, embedding_dim: int, num_heads: int, mlp_dim: int,
                 attention_downsample_rate: int = 2):
        super().__init__()
        self.layers = nn.ModuleList([
            TwoWayAttentionBlock(embedding_dim, num_heads, mlp_dim, attention_downsample_rate,
                                 skip_first_layer_pe=(i == 0))
            for i in range(depth)
        ])
        self.final_attn_token_to_image = Attention(embedding_dim, num_heads, attention_downsample_rate)
        self.norm_final_attn = nn.LayerNorm(embedding_dim)

    def forward(self, image_embedding: torch.Tensor, image_pe: torch.Tensor,
                point_embedding: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """image_embedding, image_pe: (B, C, h, w); point_embedding: (B, n, C)."""
        image_embedding = image_embedding.flatten(2).permute(0, 2, 1)
        image_pe = image_pe.flatten(2).permute(0, 2, 1)
        queries, keys = point_embedding, image_embedding
        for layer in self.layers:
            queries, keys = layer(queries, keys, point_embedding, image_pe)
        attn_out = self.final_attn_token_to_image(q=queries + point_embedding, k=keys + image_pe, v=keys)
        queries = self.norm_final_attn(queries + attn_out)
        return queries, keys


def _output_upscaling(dim: int) -> nn.Sequential:
    """1/16 -> 1/4 upscaling to dim // 8 channels."""
    return nn.Sequential(
        nn.ConvTranspose2d(dim, dim // 4, kernel_size=2, stride=2),
        LayerNorm2d(dim // 4),
        nn.GELU(),
        nn.ConvTranspose2d(dim // 4, dim // 8, kernel_size=2, stride=2),
        nn.GELU(),
    )


def hypernetwork_logits(hyper: torch.Tensor, upscaled: torch.Tensor) -> torch.Tensor:
    """Dot product of a (B, c) token-derived vector with (B, c, H, W) per-pixel features -> (B, 1, H, W)."""
    b, c, h, w = upscaled.shape
    return (hyper.unsqueeze(1) @ upscaled.view(b, c, h * w)).view(b, 1, h, w)


class EdgeAwareMaskDecoder(nn.Module):
    """Two-way transformer with a single mask token and a parallel edge token."""

    MASK, EDGE = 0, 1

    def __init__(self, transformer_dim: int, config: DecoderConfig):
        super().__init__()
        self.transformer_dim = transformer_dim
        self.transformer = TwoWayTransformer(
            depth=config.transformer_depth,
            embedding_dim=transformer_dim,
            num_heads=config.num_heads,
            mlp_dim=config.mlp_dim,
            attention_downsample_rate=config.attention_downsample_rate,
        )
        self.output_tokens = nn.Embedding(2, transformer_dim)
        self.mask_upscaling = _output_upscaling(transformer_dim)
        self.edge_upscaling = _output_upscaling(transformer_dim)
        self.mask_hypernetwork = MLP(transformer_dim, transformer_dim, transformer_dim // 8, 3)
        self.edge_hypernetwork = MLP(transformer_dim, transformer_dim, transformer_dim // 8, 3)

    def two_way_decode(self, f_deep: torch.Tensor, image_pe: torch.Tensor,
                       prompt_tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns the updated mask token, edge token (each (B, C)) and attended features (B, C, h, w)."""
        if f_deep.shape[1] != self.transformer_dim or prompt_tokens.shape[-1] != self.transformer_dim:
            raise ShapeError(f"Decoder width {self.transformer_dim} does not match features "
                             f"{tuple(f_deep.shape)} / prompt tokens {tuple(prompt_tokens.shape)}")
        b, c, h, w = f_deep.shape
        output_tokens = self.output_tokens.weight.unsqueeze(0).expand(b, -1, -1)
        tokens = torch.cat([output_tokens, prompt_tokens], dim=1)
        pos = image_pe.expand(b, -1, -1, -1)
        hs, keys = self.transformer(f_deep, pos, tokens)
        f_attn = keys.transpose(1, 2).reshape(b, c, h, w)
        return hs[:, self.MASK], hs[:, self.EDGE], f_attn

    def coarse_heads(self, t_mask: torch.Tensor, t_edge: torch.Tensor,
                     f_attn: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Coarse mask and edge logits (B, 1, s_in/4, s_in/4) through independent hypernetwork heads."""
        m0 = hypernetwork_logits(self.mask_hypernetwork(t_mask), self.mask_upscaling(f_attn))
        e0 = hypernetwork_logits(self.edge_hypernetwork(t_edge), self.edge_upscaling(f_attn))
        return m0, e0


def _conv_gn_relu(in_channels: int, out_channels: int, groups: int) -> List[nn.Module]:
    return [
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
        nn.GroupNorm(groups, out_channels),
        nn.ReLU(),
    ]


class FeatureProjector(nn.Module):
    """Maps one 1/16 feature map to C_r channels at 1/8: conv, normalization, 2x upsampling."""

    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.body = nn.Sequential(*_conv_gn_relu(in_channels, out_channels, groups))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.body(x)
        return resize(y, y.shape[-1] * 2)


class RefinementBlock(nn.Module):
    """2x upsampling followed by two conv + norm blocks with a residual skip."""

    def __init__(self, in_channels: int, out_channels: int, groups: int):
        super().__init__()
        self.body = nn.Sequential(
            *_conv_gn_relu(in_channels, out_channels, groups),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.GroupNorm(groups, out_channels),
        )
        self.skip = (nn.Conv2d(in_channels, out_channels, kernel_size=1)
                     if in_channels != out_channels else nn.Identity())
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = resize(x, x.shape[-1] * 2)
        return self.act(self.body(x) + self.skip(x))


@dataclass
class PyramidOutputs:
    """(mask, edge) logits at 1/4, 1/2 and full patch resolution plus the mask quality score."""
    p4: torch.Tensor                      # (B, 2, s_in/4, s_in/4)
    p2: torch.Tensor                      # (B, 2, s_in/2, s_in/2)
    p1: torch.Tensor                      # (B, 2, s_in, s_in)
    p_iou: Optional[torch.Tensor] = None  # (B,)
    coarse: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
    x1: Optional[torch.Tensor] = None     # final refined features, input of the quality head

    def scales(self) -> List[Tuple[int, torch.Tensor]]:
        return [(1, self.p1), (2, self.p2), (4, self.p4)]

    @property
    def mask_logits(self) -> torch.Tensor:
        return self.p1[:, 0]

    def masks(self) -> torch.Tensor:
        """Binary masks (B, s_in, s_in): mask logit above 0, i.e. probability above 0.5."""
        return self.mask_logits > 0


class ProgressiveRefiner(nn.Module):
    def __init__(self, shallow_channels: int, deep_channels: int, config: DecoderConfig):
        super().__init__()
        c_r, groups = config.refine_channels, config.norm_groups
        self.shallow_proj = FeatureProjector(shallow_channels, c_r, groups)
        self.deep_proj = FeatureProjector(deep_channels, c_r, groups)
        self.blocks = nn.ModuleList([
            RefinementBlock(2 * c_r + 3 + 2, c_r, groups),
            RefinementBlock(c_r + 3 + 2, c_r, groups),
            RefinementBlock(c_r + 3 + 2, c_r, groups),
        ])
        self.heads = nn.ModuleList([nn.Conv2d(c_r, 2, kernel_size=3, padding=1) for _ in range(3)])

    def project_features(self, f_shallow: torch.Tensor, f_attn: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.shallow_proj(f_shallow), self.deep_proj(f_attn)

    def refine(self, f8s: torch.Tensor, f8d: torch.Tensor, image: torch.Tensor,
               coarse: Tuple[torch.Tensor, torch.Tensor]) -> PyramidOutputs:
        s_in = image.shape[-1]
        if f8s.shape[-1] * 8 != s_in or f8d.shape[-1] * 8 != s_in:
            raise ShapeError(f"1/8 features {tuple(f8s.shape[-2:])} do not match image side {s_in}")
        p0 = torch.cat(coarse, dim=1)
        if p0.shape[-1] * 4 != s_in:
            raise ShapeError(f"Coarse outputs {tuple(p0.shape[-2:])} do not match image side {s_in}")

        side = s_in // 8
        x = self.blocks[0](torch.cat([f8s, f8d, resize(image, side), resize(p0, side)], dim=1))
        predictions = [self.heads[0](x)]
        for block, head in zip(self.blocks[1:], self.heads[1:]):
            side = x.shape[-1]
            x = block(torch.cat([x, resize(image, side), predictions[-1]], dim=1))
            predictions.append(head(x))
        p4, p2, p1 = predictions
        return PyramidOutputs(p4=p4, p2=p2, p1=p1, coarse=coarse, x1=x)


class IoUHead(nn.Module):
    """conv -> ReLU -> global average pool -> linear -> sigmoid."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.act = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(channels, 1)

    def forward(self, x1: torch.Tensor) -> torch.Tensor:
        pooled = self.pool(self.act(self.conv(x1))).flatten(1)
        return torch.sigmoid(self.fc(pooled)).squeeze(1)
