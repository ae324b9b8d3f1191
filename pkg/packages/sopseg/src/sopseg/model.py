import logging
from typing import Dict, List, TYPE_CHECKING

import torch
from torch import nn

from sopseg.api import ShapeError
from sopseg.config import ModelConfig
from sopseg.decoder import EdgeAwareMaskDecoder, IoUHead, ProgressiveRefiner, PyramidOutputs
from sopseg.encoder import ImageEncoder
from sopseg.prompting import PromptEncoder

if TYPE_CHECKING:
    from sopseg.data import PatchBatch, Prediction

logger = logging.getLogger(__name__)


class SopsegModel(nn.Module):
    """Prompted small-object segmenter: encoder, prompt encoder, edge-aware decoder, refiner, quality head."""

    def __init__(self, config: ModelConfig, s_in: int):
        super().__init__()
        self.config = config
        self.s_in = s_in
        width = config.encoder.out_chans
        self.image_encoder = ImageEncoder(config.encoder, s_in)
        self.prompt_encoder = PromptEncoder(width, s_in, mode=config.prompt.mode)
        self.mask_decoder = EdgeAwareMaskDecoder(width, config.decoder)
        self.refiner = ProgressiveRefiner(self.image_encoder.shallow_channels, width, config.decoder)
        self.iou_head = IoUHead(config.decoder.refine_channels)
        if config.encoder.freeze:
            self.freeze_prompt_encoder()

    def freeze_prompt_encoder(self) -> None:
        for p in self.prompt_encoder.parameters():
            p.requires_grad_(False)

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """Trainable parameters by optimizer group; frozen parameters are left out."""
        def trainable(*modules: nn.Module) -> List[nn.Parameter]:
            return [p for m in modules for p in m.parameters() if p.requires_grad]

        return {
            'encoder': trainable(self.image_encoder),
            'prompt': trainable(self.prompt_encoder),
            'decoder': trainable(self.mask_decoder),
            'refine': trainable(self.refiner, self.iou_head),
        }

    def forward(self, image: torch.Tensor, prompt_coords: torch.Tensor) -> PyramidOutputs:
        """
        Args:
            image: (B, 3, s_in, s_in) normalized patches
            prompt_coords: (B, 5, 2) crop-space coordinates [box-tl, box-br, P1, C, P2]
        """
        if prompt_coords.shape[0] != image.shape[0]:
            raise ShapeError(f"Batch size mismatch: {image.shape[0]} patches, {prompt_coords.shape[0]} prompts")
        encoded = self.image_encoder(image)
        prompt = self.prompt_encoder(prompt_coords.to(image.dtype))
        image_pe = self.prompt_encoder.dense_pe(encoded.f_deep.shape[-1]).to(image.dtype)
        t_mask, t_edge, f_attn = self.mask_decoder.two_way_decode(encoded.f_deep, image_pe, prompt.tokens)
        coarse = self.mask_decoder.coarse_heads(t_mask, t_edge, f_attn)
        f8s, f8d = self.refiner.project_features(encoded.f_shallow, f_attn)
        outputs = self.refiner.refine(f8s, f8d, image, coarse)
        outputs.p_iou = self.iou_head(outputs.x1)
        return outputs

    @torch.no_grad()
    def predict(self, batch: 'PatchBatch') -> 'Prediction':
        from sopseg.data import Prediction

        was_training = self.training
        self.eval()
        try:
            outputs = self(batch.patches.to(self.device, self.dtype), batch.prompts.to(self.device, self.dtype))
        finally:
            self.train(was_training)
        return Prediction(masks=outputs.masks().cpu().numpy(), scores=outputs.p_iou.float().cpu().numpy())
