from __future__ import annotations

import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from sopseg.api import ConfigError
from sopseg.utils import LazyFormatter, format_as_yaml, load_yaml

logger = logging.getLogger(__name__)


class RamParams(BaseModel):
    """Region-adaptive magnification parameters."""
    model_config = ConfigDict(extra='forbid', frozen=True)
    m: float = 32.0                 # size threshold, px
    k0: float = 2.0                 # initial expand factor
    s_max: float = 1024.0           # max region size, px
    s_in: int = 256                 # network input side, px

    @model_validator(mode='after')
    def _check_invariants(self) -> 'RamParams':
        if self.m <= 0:
            raise ValueError(f"m must be positive, got {self.m}")
        if self.k0 <= 1:
            raise ValueError(f"k0 must be greater than 1, got {self.k0}")
        if self.s_max <= self.k0 * self.m:
            raise ValueError(f"s_max ({self.s_max}) must exceed k0*m ({self.k0 * self.m})")
        if self.s_in <= 0:
            raise ValueError(f"s_in must be positive, got {self.s_in}")
        return self

    @property
    def k(self) -> float:
        """Slope of the linear branch, chosen so that S(s_max) = s_max."""
        return (self.s_max - self.k0 * self.m) / (self.s_max - self.m)


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    backend: Literal['tiny', 'pretrained'] = 'tiny'
    freeze: bool = False
    checkpoint: Optional[str] = None  # tensor archive for the pretrained backend
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 4
    num_heads: int = 3
    mlp_ratio: float = 4.0
    out_chans: int = 64               # C_enc
    pe_source_side: int = 256         # input side the learned PE grid was trained for
    shallow_index: int = 0            # transformer block whose output is tapped as f_shallow

    @model_validator(mode='after')
    def _check(self) -> 'EncoderConfig':
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})")
        if not 0 <= self.shallow_index < self.depth:
            raise ValueError(f"shallow_index must be in [0, {self.depth}), got {self.shallow_index}")
        if self.pe_source_side % self.patch_size != 0:
            raise ValueError(f"pe_source_side ({self.pe_source_side}) must be divisible by patch_size ({self.patch_size})")
        if self.backend == 'pretrained' and not self.checkpoint:
            raise ValueError("pretrained backend requires 'checkpoint'")
        return self


class PromptConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    mode: Literal['oriented', 'box'] = 'oriented'


class DecoderConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    transformer_depth: int = 2
    num_heads: int = 4
    mlp_dim: int = 256
    attention_downsample_rate: int = 2
    refine_channels: int = 32         # C_r
    norm_groups: int = 8


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    encoder: EncoderConfig = EncoderConfig()
    prompt: PromptConfig = PromptConfig()
    decoder: DecoderConfig = DecoderConfig()

    @model_validator(mode='after')
    def _check(self) -> 'ModelConfig':
        width = self.encoder.out_chans
        if width % 8 != 0:
            raise ValueError(f"encoder.out_chans ({width}) must be divisible by 8")
        if width % (self.decoder.num_heads * self.decoder.attention_downsample_rate) != 0:
            raise ValueError(f"encoder.out_chans ({width}) must be divisible by "
                             f"decoder.num_heads * decoder.attention_downsample_rate")
        if self.decoder.refine_channels % self.decoder.norm_groups != 0:
            raise ValueError("decoder.refine_channels must be divisible by decoder.norm_groups")
        return self


class LossConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    lambda_iou: float = Field(5.0, gt=0)
    edge_supervision: bool = True
    smooth_l1_beta: float = Field(1.0, gt=0)
    dice_eps: float = Field(1e-6, gt=0)
    edge_sigma: float = Field(1.0, gt=0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    lr_decoder: float = Field(5e-5, gt=0)
    lr_refine: float = Field(1e-3, gt=0)
    lr_encoder: float = Field(1e-4, gt=0)   # only used when the encoder is trainable
    epochs: int = Field(32, gt=0)
    batch_size: int = Field(8, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    eta_min: float = Field(0.0, ge=0)       # cosine annealing floor
    seed: Optional[int] = None              # falls back to RunConfig.seed
    num_workers: int = Field(0, ge=0)
    jitter: Tuple[float, float] = (0.3, 0.7)
    hflip: bool = True
    loss: LossConfig = LossConfig()

    @model_validator(mode='after')
    def _check(self) -> 'TrainConfig':
        lo, hi = self.jitter
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"jitter must satisfy 0 <= lo <= hi <= 1, got {self.jitter}")
        return self


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    image_side: int = Field(256, gt=0)
    train_images: int = Field(125, ge=0)
    val_images: int = Field(25, ge=0)
    objects_per_image: Tuple[int, int] = (3, 5)
    size_range: Tuple[float, float] = (8.0, 64.0)
    aspect_range: Tuple[float, float] = (1.0, 3.0)
    shape_kinds: List[Literal['rectangle', 'ellipse', 'lshape']] = ['rectangle', 'ellipse', 'lshape']
    noise_level: float = Field(0.08, ge=0)
    min_contrast: float = Field(0.25, gt=0, le=1)
    max_placement_attempts: int = Field(50, gt=0)

    @model_validator(mode='after')
    def _check(self) -> 'SynthConfig':
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"objects_per_image must satisfy 1 <= lo <= hi, got {self.objects_per_image}")
        lo, hi = self.size_range
        if not 2 <= lo <= hi:
            raise ValueError(f"size_range must satisfy 2 <= lo <= hi, got {self.size_range}")
        # a rotated square shape plus a 2 px border has to fit
        if hi * math.sqrt(2) + 4 >= self.image_side:
            raise ValueError(f"size_range upper bound {hi} too large for image_side {self.image_side}")
        lo, hi = self.aspect_range
        if not 1 <= lo <= hi:
            raise ValueError(f"aspect_range must satisfy 1 <= lo <= hi, got {self.aspect_range}")
        if not self.shape_kinds:
            raise ValueError("shape_kinds must not be empty")
        return self


class DataConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    root: str = 'data'
    train_annotations: str = 'data/train.json'
    val_annotations: str = 'data/val.json'
    magnification: Literal['adaptive', 'fixed'] = 'adaptive'
    fixed_region_size: float = Field(256.0, gt=0)
    pixel_mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    pixel_std: Tuple[float, float, float] = (0.229, 0.224, 0.225)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    dilation_ratio: float = Field(0.005, gt=0)
    batch_size: int = Field(16, gt=0)
    size_buckets: Tuple[float, float] = (32.0, 96.0)


class AnnotateConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    tau: float = Field(0.5, ge=0, le=1)
    mask_format: Literal['png', 'rle'] = 'png'
    render_overlays: bool = True
    overlay_alpha: float = Field(0.5, ge=0, le=1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')
    seed: int = 0
    device: Literal['auto', 'cpu', 'cuda'] = 'auto'
    ram: RamParams = RamParams()
    data: DataConfig = DataConfig()
    synth: SynthConfig = SynthConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    annotate: AnnotateConfig = AnnotateConfig()

    @model_validator(mode='after')
    def _check(self) -> 'RunConfig':
        if self.ram.s_in % self.model.encoder.patch_size != 0:
            raise ValueError(f"ram.s_in ({self.ram.s_in}) must be divisible by the patch stride "
                             f"({self.model.encoder.patch_size})")
        return self

    @property
    def train_seed(self) -> int:
        return self.seed if self.train.seed is None else self.train.seed


####################################################
# Resolution: defaults < environment < file < flags
####################################################

ENV_OVERRIDES: Dict[str, str] = {
    'SOPSEG_DEVICE': 'device',
    'SOPSEG_NUM_WORKERS': 'train.num_workers',
}

Source = Literal['default', 'env', 'file', 'flag']


class ResolvedConfig(BaseModel):
    """A fully validated config together with the origin of every leaf value."""
    model_config = ConfigDict(extra='forbid')
    config: RunConfig
    provenance: Dict[str, Source]

    def dump(self) -> Dict[str, Any]:
        return {'config': self.config.model_dump(mode='json'), 'provenance': dict(sorted(self.provenance.items()))}


def parse_override(expression: str) -> Tuple[str, Any]:
    """Parses `section.key=value`, the value is read as a YAML scalar (`1e-3`, `true`, `[0.3, 0.7]`)."""
    if '=' not in expression:
        raise ConfigError(f"Override '{expression}' must have the form section.key=value")
    key, raw = expression.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override '{expression}' has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse value of override '{expression}': {e}", e)
    return key, value


def _flatten(data: Mapping[str, Any], prefix: str = '') -> Dict[str, Any]:
    result = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping):
            result.update(_flatten(value, path + '.'))
        else:
            result[path] = value
    return result


def _set_dotted(target: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split('.')
    node = target
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def _read_config_file(config_path: str) -> Dict[str, Any]:
    try:
        data = load_yaml(config_path)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file {config_path} not found", e)
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {config_path} is not valid YAML: {e}", e)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {config_path} must contain a mapping, got {type(data).__name__}")
    # run_config.yaml of a previous run wraps the values next to their provenance
    if set(data.keys()) == {'config', 'provenance'}:
        data = data['config']
    return data


def resolve_config(
        config_path: Optional[str] = None,
        overrides: Sequence[str] = (),
        environ: Optional[Mapping[str, str]] = None,
) -> ResolvedConfig:
    """Merges defaults, environment, config file and command-line overrides (in that precedence order).

    Args:
        config_path: YAML file path or `module:resource` reference, optional
        overrides: `section.key=value` expressions from the command line
        environ: environment to read `SOPSEG_*` variables from, defaults to `os.environ`
    """
    environ = os.environ if environ is None else environ
    layers: List[Tuple[str, Dict[str, Any]]] = []

    env_layer = {}
    for var, key in ENV_OVERRIDES.items():
        if environ.get(var):
            env_layer[key] = yaml.safe_load(environ[var])
    layers.append(('env', env_layer))

    if config_path is not None:
        layers.append(('file', _flatten(_read_config_file(config_path))))

    flag_layer = {}
    for expression in overrides:
        key, value = parse_override(expression)
        flag_layer[key] = value
    layers.append(('flag', flag_layer))

    merged = RunConfig().model_dump()
    provenance: Dict[str, str] = {key: 'default' for key in _flatten(merged)}
    for source, layer in layers:
        for key, value in layer.items():
            _set_dotted(merged, key, value)
            provenance[key] = source
            if isinstance(value, Mapping):
                for child in _flatten(value, key + '.'):
                    provenance[child] = source

    try:
        config = RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}", e)

    leaves = _flatten(config.model_dump())
    provenance = {key: provenance.get(key, 'default') for key in leaves}
    logger.debug("Resolved configuration provenance:\n%r", LazyFormatter(provenance))
    return ResolvedConfig(config=config, provenance=provenance)


def write_run_config(resolved: ResolvedConfig, run_dir: str | Path) -> Path:
    """Writes `run_config.yaml` (resolved values plus provenance) into the run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / 'run_config.yaml'
    with open(path, 'w') as f:
        f.write(format_as_yaml(resolved.dump(), trim=False))
    return path
