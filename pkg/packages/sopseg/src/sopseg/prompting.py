import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from sopseg.api import DomainError, ShapeError
from sopseg.geometry import HBox, PromptPoints


class PromptRole(IntEnum):
    BOX_TL = 0
    BOX_BR = 1
    POINT_FG = 2


ORIENTED_ROLES = (PromptRole.BOX_TL, PromptRole.BOX_BR, PromptRole.POINT_FG, PromptRole.POINT_FG, PromptRole.POINT_FG)
BOX_ROLES = ORIENTED_ROLES[:2]


@dataclass
class PromptEmbedding:
    tokens: torch.Tensor                 # (B, n_tokens, C_enc)
    roles: Tuple[PromptRole, ...]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


class PositionEmbeddingRandom(nn.Module):
    """Positional encoding using random spatial frequencies."""

    def __init__(self, num_pos_feats: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer('gaussian_matrix', scale * torch.randn((2, num_pos_feats)))

    def encode(self, coords: torch.Tensor) -> torch.Tensor:
        """Coords normalized to [0, 1], shape (..., 2) -> (..., 2 * num_pos_feats)."""
        coords = 2 * coords - 1
        coords = coords.to(self.gaussian_matrix.dtype) @ self.gaussian_matrix
        coords = 2 * math.pi * coords
        return torch.cat([torch.sin(coords), torch.cos(coords)], dim=-1)

    def dense(self, side: int) -> torch.Tensor:
        """(C, side, side) encoding of the centers of a side x side grid."""
        device = self.gaussian_matrix.device
        grid = torch.ones((side, side), device=device, dtype=self.gaussian_matrix.dtype)
        y_embed = (grid.cumsum(dim=0) - 0.5) / side
        x_embed = (grid.cumsum(dim=1) - 0.5) / side
        return self.encode(torch.stack([x_embed, y_embed], dim=-1)).permute(2, 0, 1)


PointsLike = Union[PromptPoints, np.ndarray, torch.Tensor]


class PromptEncoder(nn.Module):
    """Turns crop-space box corners and oriented points into prompt tokens.

    Each token is the frequency encoding of its coordinates (divided by s_in) plus a
    learned role embedding. All three oriented points share the foreground-point role.
    """

    def __init__(self, embed_dim: int, s_in: int, mode: str = 'oriented'):
        super().__init__()
        self.embed_dim = embed_dim
        self.s_in = s_in
        self.mode = mode
        self.pe_layer = PositionEmbeddingRandom(embed_dim // 2)
        self.role_embeddings = nn.Embedding(len(PromptRole), embed_dim)

    @property
    def n_tokens(self) -> int:
        return len(ORIENTED_ROLES) if self.mode == 'oriented' else len(BOX_ROLES)

    def _to_tensor(self, entity, rows: int) -> torch.Tensor:
        if isinstance(entity, (HBox, PromptPoints)):
            entity = entity.to_array()
        tensor = torch.as_tensor(entity, dtype=self.gaussian_dtype, device=self.role_embeddings.weight.device)
        if tensor.dim() == 2:
            tensor = tensor.unsqueeze(0)
        if tensor.dim() != 3 or tensor.shape[1:] != (rows, 2):
            raise ShapeError(f"Expected ({rows}, 2) or (B, {rows}, 2) coordinates, got {tuple(tensor.shape)}")
        return tensor

    @property
    def gaussian_dtype(self) -> torch.dtype:
        return self.pe_layer.gaussian_matrix.dtype

    def _embed(self, coords: torch.Tensor, roles, s_in: float) -> torch.Tensor:
        if not torch.isfinite(coords).all():
            raise DomainError("Prompt coordinates must be finite")
        if (coords < 0).any() or (coords > s_in).any():
            raise DomainError(f"Prompt coordinates must lie within [0, {s_in}], "
                              f"got range [{coords.min().item():.3f}, {coords.max().item():.3f}]")
        role_ids = torch.tensor([int(r) for r in roles], device=coords.device)
        return self.pe_layer.encode(coords / s_in) + self.role_embeddings(role_ids).to(coords.dtype)

    def encode_points(self, points: PointsLike, s_in: Optional[float] = None) -> torch.Tensor:
        """(B, 3, C) tokens for P1, C, P2."""
        coords = self._to_tensor(points, 3)
        return self._embed(coords, ORIENTED_ROLES[2:], s_in or self.s_in)

    def encode_box(self, box: Union[HBox, np.ndarray, torch.Tensor], s_in: Optional[float] = None) -> torch.Tensor:
        """(B, 2, C) tokens for the top-left and bottom-right corners."""
        coords = self._to_tensor(box, 2)
        return self._embed(coords, BOX_ROLES, s_in or self.s_in)

    def assemble_prompt(self, box, points: Optional[PointsLike] = None, s_in: Optional[float] = None) -> PromptEmbedding:
        """Tokens in the fixed order [box-tl, box-br, P1, C, P2]; box mode keeps only the corners."""
        box_tokens = self.encode_box(box, s_in)
        if self.mode == 'box':
            return PromptEmbedding(box_tokens, BOX_ROLES)
        if points is None:
            raise DomainError("Oriented prompting needs the three axis points")
        return PromptEmbedding(torch.cat([box_tokens, self.encode_points(points, s_in)], dim=1), ORIENTED_ROLES)

    def forward(self, prompt_coords: torch.Tensor) -> PromptEmbedding:
        """Embeds a (B, 5, 2) coordinate array ordered [box-tl, box-br, P1, C, P2]."""
        if prompt_coords.dim() != 3 or prompt_coords.shape[1:] != (5, 2):
            raise ShapeError(f"Expected (B, 5, 2) prompt coordinates, got {tuple(prompt_coords.shape)}")
        return self.assemble_prompt(prompt_coords[:, :2], prompt_coords[:, 2:])

    def dense_pe(self, side: int) -> torch.Tensor:
        """(1, C, side, side) positional encoding of the image feature grid."""
        return self.pe_layer.dense(side).unsqueeze(0)
