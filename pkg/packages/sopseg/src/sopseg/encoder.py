"""Image encoder: a plain ViT with a learned positional grid that is resampled to the working input side."""
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from sopseg.api import ConfigError, ShapeError
from sopseg.config import EncoderConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PeGrid:
    """Learned positional embeddings laid out as an (H_pe, W_pe, C) grid."""
    values: torch.Tensor
    source_side: int
    patch_size: int = 16

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ShapeError(f"PE grid must be (H, W, C), got shape {tuple(self.values.shape)}")
        expected = self.source_side // self.patch_size
        if self.values.shape[0] != expected or self.values.shape[1] != expected:
            raise ShapeError(f"PE grid for side {self.source_side} must be {expected}x{expected}, "
                             f"got {tuple(self.values.shape[:2])}")

    @property
    def grid_side(self) -> int:
        return self.values.shape[0]


def interpolate_pe(pe: PeGrid, target_side: int) -> PeGrid:
    """Bilinear resampling of the grid (corner-aligned) to serve inputs of side `target_side`."""
    if target_side <= 0 or target_side % pe.patch_size != 0:
        raise ConfigError(f"Input side {target_side} is not divisible by the patch stride {pe.patch_size}")
    if target_side == pe.source_side:
        return pe
    grid = target_side // pe.patch_size
    resized = F.interpolate(pe.values.permute(2, 0, 1).unsqueeze(0), size=(grid, grid),
                            mode='bilinear', align_corners=True)
    return PeGrid(resized.squeeze(0).permute(1, 2, 0), source_side=target_side, patch_size=pe.patch_size)


@dataclass
class EncoderOutput:
    f_deep: torch.Tensor        # (B, C_enc, s_in/16, s_in/16)
    f_shallow: torch.Tensor     # (B, embed_dim, s_in/16, s_in/16)


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dimension of a (B, C, H, W) map."""

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    """Pre-norm transformer block with global attention."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    """ViT backbone producing deep (neck-projected) and shallow features at stride 16.

    The positional grid is stored at `pe_source_side` and resampled at runtime whenever
    the working input side differs, so a single set of weights serves any s_in divisible by 16.
    """

    def __init__(self, config: EncoderConfig, s_in: int):
        super().__init__()
        if s_in % config.patch_size != 0:
            raise ConfigError(f"Input side {s_in} is not divisible by the patch stride {config.patch_size}")
        self.config = config
        self.s_in = s_in
        self.patch_size = config.patch_size
        self.patch_embed = nn.Conv2d(3, config.embed_dim, kernel_size=config.patch_size, stride=config.patch_size)
        grid = config.pe_source_side // config.patch_size
        self.pos_embed = nn.Parameter(torch.zeros(grid, grid, config.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            [Block(config.embed_dim, config.num_heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.neck = nn.Sequential(
            nn.Conv2d(config.embed_dim, config.out_chans, kernel_size=1, bias=False),
            LayerNorm2d(config.out_chans),
            nn.Conv2d(config.out_chans, config.out_chans, kernel_size=3, padding=1, bias=False),
            LayerNorm2d(config.out_chans),
        )
        self.frozen = False
        if config.freeze:
            self.freeze()

    @property
    def shallow_channels(self) -> int:
        return self.config.embed_dim

    @property
    def out_channels(self) -> int:
        return self.config.out_chans

    def pe_grid(self) -> PeGrid:
        return PeGrid(self.pos_embed, source_side=self.config.pe_source_side, patch_size=self.patch_size)

    def freeze(self) -> None:
        """Turns off gradients and pins the module in eval mode."""
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()

    def train(self, mode: bool = True) -> 'ImageEncoder':
        return super().train(mode and not self.frozen)

    def forward(self, image: torch.Tensor) -> EncoderOutput:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"Expected a (B, 3, H, W) image batch, got {tuple(image.shape)}")
        if image.shape[2] != image.shape[3] or image.shape[2] != self.s_in:
            raise ShapeError(f"Expected square patches of side {self.s_in}, got {tuple(image.shape[2:])}")
        x = self.patch_embed(image).permute(0, 2, 3, 1)          # (B, h, w, C)
        pe = interpolate_pe(self.pe_grid(), self.s_in).values
        x = x + pe.unsqueeze(0)
        b, h, w, c = x.shape
        x = x.reshape(b, h * w, c)
        shallow = None
        for index, block in enumerate(self.blocks):
            x = block(x)
            if index == self.config.shallow_index:
                shallow = x
        f_shallow = shallow.reshape(b, h, w, c).permute(0, 3, 1, 2)
        f_deep = self.neck(x.reshape(b, h, w, c).permute(0, 3, 1, 2))
        return EncoderOutput(f_deep=f_deep, f_shallow=f_shallow)


def encode(encoder: ImageEncoder, image: torch.Tensor) -> EncoderOutput:
    return encoder(image)
