from typing import List, Sequence

import numpy as np
import torch

from sopseg.config import (DecoderConfig, EncoderConfig, EvalConfig, ModelConfig, RamParams, ResolvedConfig,
                           RunConfig, SynthConfig, TrainConfig)
from sopseg.data import PatchBatch, PatchDataset, Prediction, SampleRecord, generate_synthetic
from sopseg.model import SopsegModel

MICRO_SIDE = 64


def micro_model_config(**encoder_overrides) -> ModelConfig:
    """Smallest model that still exercises every stage, for s_in = 64."""
    encoder = dict(embed_dim=32, depth=2, num_heads=2, out_chans=16, pe_source_side=MICRO_SIDE, shallow_index=0)
    encoder.update(encoder_overrides)
    return ModelConfig(
        encoder=EncoderConfig(**encoder),
        decoder=DecoderConfig(transformer_depth=1, num_heads=2, mlp_dim=32, attention_downsample_rate=2,
                              refine_channels=8, norm_groups=4),
    )


def micro_model(seed: int = 0, **encoder_overrides) -> SopsegModel:
    torch.manual_seed(seed)
    return SopsegModel(micro_model_config(**encoder_overrides), MICRO_SIDE)


def micro_synth_config(train_images: int = 3, val_images: int = 2) -> SynthConfig:
    return SynthConfig(image_side=96, train_images=train_images, val_images=val_images, objects_per_image=(2, 3),
                       size_range=(8.0, 24.0))


def micro_run_config(data_root: str = 'data', epochs: int = 2, **train_overrides) -> RunConfig:
    train = dict(epochs=epochs, batch_size=4, lr_encoder=1e-3, lr_decoder=1e-3, lr_refine=1e-3)
    train.update(train_overrides)
    return RunConfig(
        seed=0,
        device='cpu',
        ram=RamParams(s_in=MICRO_SIDE),
        synth=micro_synth_config(),
        data={'root': data_root, 'train_annotations': f"{data_root}/train.json",
              'val_annotations': f"{data_root}/val.json"},
        model=micro_model_config(),
        train=TrainConfig(**train),
        eval=EvalConfig(batch_size=4),
    )


def resolved(config: RunConfig) -> ResolvedConfig:
    return ResolvedConfig(config=config, provenance={})


def tiny_records(seed: int = 0, n_images: int = 2) -> List[SampleRecord]:
    return generate_synthetic(micro_synth_config(), seed, n_images=n_images).records


def tiny_dataset(seed: int = 0, n_images: int = 2, mode: str = 'eval', **kwargs) -> PatchDataset:
    return PatchDataset(tiny_records(seed, n_images), RamParams(s_in=MICRO_SIDE), mode=mode, **kwargs)


def square_mask(side: int, top: int, left: int, size: int) -> np.ndarray:
    mask = np.zeros((side, side), dtype=bool)
    mask[top:top + size, left:left + size] = True
    return mask


class OraclePredictor:
    """Returns the ground truth with a perfect score."""

    def predict(self, batch: PatchBatch) -> Prediction:
        return Prediction(masks=batch.masks.numpy() > 0.5, scores=np.ones(len(batch)))


class EmptyPredictor:
    def predict(self, batch: PatchBatch) -> Prediction:
        side = batch.patches.shape[-1]
        return Prediction(masks=np.zeros((len(batch), side, side), dtype=bool), scores=np.zeros(len(batch)))


class FixedScorePredictor:
    """Predicts the ground truth (or an empty mask without one) with preset scores, cycling through them."""

    def __init__(self, scores: Sequence[float]):
        self._scores = list(scores)
        self._index = 0

    def predict(self, batch: PatchBatch) -> Prediction:
        side = batch.patches.shape[-1]
        masks = (batch.masks.numpy() > 0.5 if batch.masks is not None
                 else np.zeros((len(batch), side, side), dtype=bool))
        scores = []
        for _ in range(len(batch)):
            scores.append(self._scores[self._index % len(self._scores)])
            self._index += 1
        return Prediction(masks=masks, scores=np.asarray(scores))
