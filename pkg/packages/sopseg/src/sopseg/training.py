import json
import logging
import math
import time
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional

import torch
from pydantic import BaseModel, ConfigDict
from torch.optim import AdamW
from torch.optim.lr_scheduler import CosineAnnealingLR
from torch.utils.data import DataLoader

from sopseg.api import DataError, NumericalError, TrainingObserver
from sopseg.checkpoint import load_weights, save_model
from sopseg.config import EvalConfig, LossConfig, TrainConfig
from sopseg.data import PatchBatch, PatchDataset, collate_patches
from sopseg.evaluation import evaluate
from sopseg.losses import LossBreakdown, multi_scale_loss
from sopseg.model import SopsegModel
from sopseg.utils import LazyFormatter, set_seed

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.jsonl'
BEST_CHECKPOINT = 'best.ckpt'
LAST_CHECKPOINT = 'last.ckpt'
TRAINER_STATE = 'trainer_state.pt'


class EpochRecord(BaseModel):
    """One line of the metrics log."""
    model_config = ConfigDict(extra='forbid')
    epoch: int
    step: int
    train_loss: float
    losses: Dict[str, float]
    val_miou: Optional[float] = None
    val_mbiou: Optional[float] = None
    lr: Dict[str, float]
    seconds: float


class FitResult(BaseModel):
    model_config = ConfigDict(extra='forbid')
    run_dir: str
    epochs: int
    global_step: int
    best_epoch: Optional[int]
    best_miou: Optional[float]
    best_checkpoint: str
    last_checkpoint: str
    metrics_log: str
    history: List[EpochRecord]


def build_optimizer(model: SopsegModel, cfg: TrainConfig) -> AdamW:
    """AdamW over the trainable groups: encoder and prompt encoder at lr_encoder (when not frozen),
    decoder at lr_decoder, refinement path and quality head at lr_refine."""
    lr_by_group = {'encoder': cfg.lr_encoder, 'prompt': cfg.lr_encoder, 'decoder': cfg.lr_decoder,
                   'refine': cfg.lr_refine}
    groups = []
    for name, params in model.parameter_groups().items():
        if params:
            groups.append({'params': params, 'lr': lr_by_group[name], 'name': name})
        else:
            logger.debug("Parameter group %s has no trainable parameters", name)
    if not groups:
        raise DataError("Model has no trainable parameters")
    return AdamW(groups, weight_decay=cfg.weight_decay)


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def build_scheduler(optimizer: AdamW, total_steps: int, cfg: TrainConfig) -> CosineAnnealingLR:
    """Cosine annealing stepped once per optimizer step, reaching eta_min after `total_steps`."""
    return CosineAnnealingLR(optimizer, T_max=max(1, total_steps), eta_min=cfg.eta_min)


def current_lr(optimizer: AdamW) -> Dict[str, float]:
    return {group.get('name', str(i)): group['lr'] for i, group in enumerate(optimizer.param_groups)}


def train_step(model: SopsegModel, optimizer: AdamW, batch: PatchBatch, loss_cfg: LossConfig) -> LossBreakdown:
    """Forward, loss, backward and one optimizer step. Raises NumericalError before stepping on a non-finite loss."""
    if batch.masks is None:
        raise DataError("Training batches need ground-truth masks")
    batch = batch.to(model.device)
    outputs = model(batch.patches.to(model.dtype), batch.prompts.to(model.dtype))
    breakdown = multi_scale_loss(outputs, batch.masks.to(model.dtype), loss_cfg)
    if not breakdown.is_finite():
        raise NumericalError("Non-finite training loss", diagnostics={'losses': breakdown.as_dict()})
    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    optimizer.step()
    return breakdown


def _loader(dataset: PatchDataset, cfg: TrainConfig, seed: int, epoch: int) -> DataLoader:
    dataset.set_epoch(epoch)
    generator = torch.Generator()
    generator.manual_seed(seed * 100_003 + epoch)
    return DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=generator,
                      num_workers=cfg.num_workers, collate_fn=collate_patches)


def _read_history(path: Path) -> List[EpochRecord]:
    if not path.exists():
        return []
    with open(path) as f:
        return [EpochRecord.model_validate_json(line) for line in f if line.strip()]


def fit(model: SopsegModel, train_set: PatchDataset, cfg: TrainConfig, run_dir: str | Path,
        val_set: Optional[PatchDataset] = None, eval_cfg: Optional[EvalConfig] = None,
        observer: Optional[TrainingObserver] = None, resume: bool = False, seed: int = 0) -> FitResult:
    """Trains the model, logging one JSON line per epoch and keeping the last and the best checkpoints.

    The best checkpoint is chosen by validation mIoU, or by the lowest training loss without a validation set.
    With `resume`, weights, optimizer, scheduler and counters are restored from `run_dir`.
    """
    if len(train_set) == 0:
        raise DataError("Cannot train on an empty dataset")
    observer = observer or TrainingObserver()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / METRICS_FILE
    best_path, last_path, state_path = run_dir / BEST_CHECKPOINT, run_dir / LAST_CHECKPOINT, run_dir / TRAINER_STATE

    set_seed(seed)
    optimizer = build_optimizer(model, cfg)
    per_epoch = steps_per_epoch(len(train_set), cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    scheduler = build_scheduler(optimizer, total_steps, cfg)

    start_epoch, global_step = 0, 0
    best_score: Optional[float] = None
    best_epoch: Optional[int] = None
    best_miou: Optional[float] = None
    if resume and state_path.exists():
        load_weights(model, last_path)
        state = torch.load(state_path, map_location='cpu', weights_only=False)
        optimizer.load_state_dict(state['optimizer'])
        scheduler.load_state_dict(state['scheduler'])
        start_epoch, global_step = state['epoch'], state['global_step']
        best_score, best_epoch, best_miou = state['best_score'], state['best_epoch'], state['best_miou']
        logger.info("Resuming %s at epoch %s, step %s", run_dir, start_epoch, global_step)
    elif resume:
        logger.warning("Nothing to resume in %s, starting from scratch", run_dir)
    if start_epoch == 0 and metrics_path.exists():
        metrics_path.unlink()
    history = _read_history(metrics_path)

    logger.info("Training %s instances for %s epochs (%s steps), lr %s", len(train_set), cfg.epochs, total_steps,
                current_lr(optimizer))
    logger.debug("Training config:\n%r", LazyFormatter(cfg))
    observer.on_train_start(total_steps, global_step)

    for epoch in range(start_epoch, cfg.epochs):
        started = time.monotonic()
        model.train()
        sums: Dict[str, float] = defaultdict(float)
        batches = 0
        for batch in _loader(train_set, cfg, seed, epoch):
            try:
                breakdown = train_step(model, optimizer, batch, cfg.loss)
            except NumericalError as e:
                e.diagnostics.update({'epoch': epoch, 'step': global_step,
                                      'instances': [s.instance_id for s in batch.samples]})
                logger.error("Aborting: non-finite loss at epoch %s step %s: %s", epoch, global_step, e.diagnostics)
                raise
            scheduler.step()
            global_step += 1
            batches += 1
            for key, value in breakdown.as_dict().items():
                sums[key] += value
            observer.on_step(global_step, float(breakdown.total))

        losses = {key: value / batches for key, value in sums.items()}
        record = EpochRecord(epoch=epoch, step=global_step, train_loss=losses['total'], losses=losses,
                             lr=current_lr(optimizer), seconds=0.0)
        if val_set is not None and len(val_set) > 0:
            report = evaluate(model, val_set, eval_cfg, num_workers=cfg.num_workers)
            record.val_miou, record.val_mbiou = report.miou, report.mbiou
        record.seconds = round(time.monotonic() - started, 3)

        with open(metrics_path, 'a') as f:
            f.write(json.dumps(record.model_dump()) + "\n")
        history.append(record)

        save_model(model, last_path, {'epoch': epoch})
        score = record.val_miou if record.val_miou is not None else -record.train_loss
        if best_score is None or score > best_score:
            best_score, best_epoch, best_miou = score, epoch, record.val_miou
            save_model(model, best_path, {'epoch': epoch})
        torch.save({
            'optimizer': optimizer.state_dict(),
            'scheduler': scheduler.state_dict(),
            'epoch': epoch + 1,
            'global_step': global_step,
            'best_score': best_score,
            'best_epoch': best_epoch,
            'best_miou': best_miou,
        }, state_path)

        logger.info("Epoch %s/%s: loss %.4f, val mIoU %s, val mBIoU %s (%.1fs)", epoch + 1, cfg.epochs,
                    record.train_loss, _fmt(record.val_miou), _fmt(record.val_mbiou), record.seconds)
        observer.on_epoch_end(record)

    result = FitResult(
        run_dir=str(run_dir),
        epochs=cfg.epochs,
        global_step=global_step,
        best_epoch=best_epoch,
        best_miou=best_miou,
        best_checkpoint=str(best_path),
        last_checkpoint=str(last_path),
        metrics_log=str(metrics_path),
        history=history,
    )
    observer.on_train_end(result)
    return result


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"
