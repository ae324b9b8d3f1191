"""Tensor archive files for model weights.

Layout (all integers little-endian):

    8 bytes   magic b"SOPSEGTA"
    uint32    format version
    uint32    header length N
    N bytes   UTF-8 JSON header: {"meta": {...}, "tensors": [{"name", "shape", "offset", "dtype"}]}
    ...       raw float32 tensor blocks, offsets relative to the end of the header

The layout is simple enough that pretrained weights from other frameworks can be converted offline.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np
import torch
from pydantic import ValidationError
from torch import nn

from sopseg.api import ConfigError, DataError
from sopseg.config import ModelConfig
from sopseg.model import SopsegModel

logger = logging.getLogger(__name__)

MAGIC = b"SOPSEGTA"
VERSION = 1
_DTYPE = np.dtype('<f4')
_PREAMBLE = struct.Struct('<8sII')


def save_archive(path: str | Path, tensors: Dict[str, torch.Tensor], meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blocks = []
    offset = 0
    for name, tensor in tensors.items():
        block = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype(_DTYPE, copy=False).tobytes()
        entries.append({'name': name, 'shape': list(tensor.shape), 'offset': offset, 'dtype': 'float32'})
        blocks.append(block)
        offset += len(block)
    header = json.dumps({'meta': meta or {}, 'tensors': entries}).encode('utf-8')
    tmp_path = path.with_suffix(path.suffix + '.tmp')
    with open(tmp_path, 'wb') as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for block in blocks:
            f.write(block)
    tmp_path.replace(path)
    return path


def read_archive(path: str | Path) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """Returns (meta, tensors by name)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read tensor archive {path}: {e}", e)
    if len(raw) < _PREAMBLE.size:
        raise DataError(f"{path} is too short to be a tensor archive")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path} is not a tensor archive (bad magic {magic!r})")
    if version != VERSION:
        raise DataError(f"{path} has archive version {version}, only {VERSION} is supported")
    data_start = _PREAMBLE.size + header_len
    try:
        header = json.loads(raw[_PREAMBLE.size:data_start].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path} has a corrupt header: {e}", e)

    tensors = {}
    for entry in header.get('tensors', []):
        if entry.get('dtype', 'float32') != 'float32':
            raise DataError(f"{path}: tensor {entry['name']} has unsupported dtype {entry['dtype']}")
        shape = tuple(int(s) for s in entry['shape'])
        count = int(np.prod(shape, dtype=np.int64))
        start = data_start + int(entry['offset'])
        end = start + count * _DTYPE.itemsize
        if end > len(raw):
            raise DataError(f"{path}: tensor {entry['name']} extends past the end of the file")
        values = np.frombuffer(raw, dtype=_DTYPE, count=count, offset=start).reshape(shape)
        tensors[entry['name']] = torch.from_numpy(values.astype(np.float32))
    return header.get('meta', {}), tensors


def _copy_into(module: nn.Module, tensors: Dict[str, torch.Tensor], names: Iterable[str], source: Path) -> None:
    state = module.state_dict()
    missing = [name for name in names if name not in tensors]
    if missing:
        raise ConfigError(f"{source} lacks {len(missing)} tensors, first: {missing[0]}")
    for name in names:
        if tuple(tensors[name].shape) != tuple(state[name].shape):
            raise ConfigError(f"{source}: tensor {name} has shape {tuple(tensors[name].shape)}, "
                              f"model expects {tuple(state[name].shape)}")
    with torch.no_grad():
        for name in names:
            state[name].copy_(tensors[name].to(state[name].dtype))


####################################################
# Model checkpoints
####################################################

def save_model(model: SopsegModel, path: str | Path, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Writes all weights plus an echo of the model config used to check shapes at load."""
    meta = {'model': model.config.model_dump(mode='json'), 's_in': model.s_in}
    if extra:
        meta.update(extra)
    return save_archive(path, model.state_dict(), meta)


def _echoed_config(meta: Dict[str, Any], path: Path) -> Tuple[ModelConfig, int]:
    try:
        return ModelConfig.model_validate(meta['model']), int(meta['s_in'])
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise ConfigError(f"{path} has no usable model config echo: {e}", e)


def load_weights(model: SopsegModel, path: str | Path) -> Dict[str, Any]:
    """Loads a checkpoint into an existing model after checking the config echo; returns the archive meta."""
    path = Path(path)
    meta, tensors = read_archive(path)
    echoed, echoed_side = _echoed_config(meta, path)
    current = model.config.model_dump(exclude={'encoder': {'freeze', 'checkpoint', 'backend'}})
    stored = echoed.model_dump(exclude={'encoder': {'freeze', 'checkpoint', 'backend'}})
    if current != stored:
        diffs = sorted(k for k in _diff_keys(current, stored))
        raise ConfigError(f"Checkpoint {path} was trained with a different model config ({', '.join(diffs)})")
    if echoed_side != model.s_in:
        logger.info("Checkpoint %s was trained at s_in=%s, running at %s", path, echoed_side, model.s_in)
    _copy_into(model, tensors, list(model.state_dict().keys()), path)
    return meta


def _diff_keys(a: Dict[str, Any], b: Dict[str, Any], prefix: str = '') -> Iterable[str]:
    for key in set(a) | set(b):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            yield from _diff_keys(va, vb, f"{prefix}{key}.")
        elif va != vb:
            yield f"{prefix}{key}"


def load_model(path: str | Path, s_in: Optional[int] = None, device: Optional[torch.device] = None) -> SopsegModel:
    """Rebuilds the model from the config echoed in the checkpoint.

    Args:
        path: checkpoint file
        s_in: working input side, defaults to the side the checkpoint was trained at
        device: target device, CPU when omitted
    """
    path = Path(path)
    meta, _ = read_archive(path)
    config, trained_side = _echoed_config(meta, path)
    # weights come from the checkpoint, not from the pretrained archive
    config = config.model_copy(update={'encoder': config.encoder.model_copy(update={'backend': 'tiny', 'checkpoint': None})})
    model = SopsegModel(config, s_in or trained_side)
    load_weights(model, path)
    return model.to(device or torch.device('cpu'))


def load_pretrained(model: SopsegModel, path: str | Path) -> None:
    """Copies image-encoder and prompt-encoder weights from an archive with `image_encoder.*` and
    `prompt_encoder.*` names. Names and shapes must match exactly."""
    path = Path(path)
    _, tensors = read_archive(path)
    names = [name for name in model.state_dict()
             if name.startswith('image_encoder.') or name.startswith('prompt_encoder.')]
    _copy_into(model, tensors, names, path)
    logger.info("Loaded %s pretrained encoder tensors from %s", len(names), path)


def build_model(config: ModelConfig, s_in: int, device: Optional[torch.device] = None) -> SopsegModel:
    """Constructs the model, importing pretrained encoder weights when the backend asks for them."""
    model = SopsegModel(config, s_in)
    if config.encoder.backend == 'pretrained':
        load_pretrained(model, config.encoder.checkpoint)
    return model.to(device or torch.device('cpu'))
