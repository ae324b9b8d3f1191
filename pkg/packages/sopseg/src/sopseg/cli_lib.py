"""Library functions behind the command-line workflows (without the main entry point).

Every command writes its resolved configuration as `run_config.yaml` next to its outputs.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from torch.utils.data import DataLoader

from sopseg.api import DataError, DomainError, Predictor, TrainingObserver
from sopseg.checkpoint import build_model, load_model
from sopseg.config import ResolvedConfig, RunConfig, write_run_config
from sopseg.data import (InstanceResult, PatchDataset, PatchSample, SampleRecord, back_project, collate_patches,
                         export_masks, generate_synthetic, load_annotations, load_image, save_dataset, save_mask)
from sopseg.evaluation import EvalReport, evaluate, format_report_table
from sopseg.geometry import OrientedBox
from sopseg.training import FitResult, fit
from sopseg.utils import resolve_device, set_seed
from sopseg.visualize import overlay_masks, render_manifest, save_overlay

logger = logging.getLogger(__name__)


####################################################
# Result models
####################################################

class SynthResult(BaseModel):
    model_config = ConfigDict(extra='forbid')
    root: str
    annotations: Dict[str, str]
    images: Dict[str, int]
    instances: Dict[str, int]
    checksums: Dict[str, str]


class EvalResult(BaseModel):
    model_config = ConfigDict(extra='forbid')
    report_json: str
    report_table: str
    report: EvalReport


class InferResult(BaseModel):
    model_config = ConfigDict(extra='forbid')
    mask_path: str
    score: float
    image_size: Tuple[int, int]            # (w, h)
    mask_pixels: int


class FlaggedInstance(BaseModel):
    model_config = ConfigDict(extra='forbid')
    id: str
    image_id: str
    class_label: str
    iou_pred: float
    overlay: Optional[str] = None


class SkippedInstance(BaseModel):
    model_config = ConfigDict(extra='forbid')
    id: str
    line: Optional[int] = None
    reason: str


class ReviewList(BaseModel):
    model_config = ConfigDict(extra='forbid')
    tau: float
    flagged: List[FlaggedInstance]
    skipped: List[SkippedInstance]


class AnnotateResult(BaseModel):
    model_config = ConfigDict(extra='forbid')
    manifest: str
    review_list: str
    n_input: int
    n_instances: int
    n_flagged: int
    n_skipped: int
    review: ReviewList


class VisualizeResult(BaseModel):
    model_config = ConfigDict(extra='forbid')
    overlays: List[str]


class AblationRun(BaseModel):
    model_config = ConfigDict(extra='forbid')
    edge_supervision: bool
    seed: int
    miou: float
    mbiou: float
    run_dir: str


class AblationResult(BaseModel):
    model_config = ConfigDict(extra='forbid')
    path: str
    runs: List[AblationRun]
    mean: Dict[str, Dict[str, float]]


####################################################
# Helpers
####################################################

def _prepare_run_dir(resolved: ResolvedConfig, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_run_config(resolved, run_dir)
    return run_dir


def _eval_dataset(records: Sequence[SampleRecord], cfg: RunConfig) -> PatchDataset:
    return PatchDataset(records, cfg.ram, mode='eval', data_cfg=cfg.data)


def predict_instances(predictor: Predictor, dataset: PatchDataset, batch_size: int,
                      num_workers: int = 0) -> Iterator[Tuple[PatchSample, np.ndarray, float]]:
    """Yields (sample, crop-space mask, predicted IoU) for every instance in dataset order."""
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=num_workers,
                        collate_fn=collate_patches)
    for batch in loader:
        prediction = predictor.predict(batch)
        for i, sample in enumerate(batch.samples):
            yield sample, prediction.masks[i], float(prediction.scores[i])


def needs_review(score: float, tau: float) -> bool:
    """Instances scoring below tau go to review; tau = 1 sends everything, tau = 0 nothing."""
    return tau >= 1.0 or score < tau


def _train_model(cfg: RunConfig, run_dir: Path, resume: bool = False,
                 observer: Optional[TrainingObserver] = None) -> FitResult:
    train_records = load_annotations(cfg.data.train_annotations, require_masks=True)
    val_records = load_annotations(cfg.data.val_annotations, require_masks=True)
    seed = cfg.train_seed
    train_set = PatchDataset(train_records, cfg.ram, mode='train', data_cfg=cfg.data, jitter=cfg.train.jitter,
                             hflip=cfg.train.hflip, seed=seed)
    val_set = _eval_dataset(val_records, cfg)
    set_seed(seed)
    model = build_model(cfg.model, cfg.ram.s_in, resolve_device(cfg.device))
    return fit(model, train_set, cfg.train, run_dir, val_set=val_set, eval_cfg=cfg.eval, observer=observer,
               resume=resume, seed=seed)


####################################################
# Commands
####################################################

def cmd_synth(resolved: ResolvedConfig, out_dir: Optional[str | Path] = None) -> SynthResult:
    """Generates the seeded synthetic train and val splits and saves them as PNG images plus annotation JSON."""
    cfg = resolved.config
    root = _prepare_run_dir(resolved, out_dir or cfg.data.root)
    splits = {'train': (cfg.synth.train_images, cfg.seed), 'val': (cfg.synth.val_images, cfg.seed + 1)}
    result = SynthResult(root=str(root), annotations={}, images={}, instances={}, checksums={})
    for split, (n_images, seed) in splits.items():
        dataset = generate_synthetic(cfg.synth, seed, n_images=n_images, prefix=split)
        result.annotations[split] = str(save_dataset(dataset, root, split))
        result.images[split] = len(dataset.images)
        result.instances[split] = len(dataset.records)
        result.checksums[split] = dataset.checksum()
    return result


def cmd_train(resolved: ResolvedConfig, run_dir: str | Path, resume: bool = False,
              observer: Optional[TrainingObserver] = None) -> FitResult:
    run_dir = _prepare_run_dir(resolved, run_dir)
    return _train_model(resolved.config, run_dir, resume=resume, observer=observer)


def cmd_eval(resolved: ResolvedConfig, checkpoint: str | Path, run_dir: str | Path,
             annotations: Optional[str] = None) -> EvalResult:
    """Evaluates a checkpoint on an annotated split and writes `eval_report.json` and `eval_report.txt`."""
    cfg = resolved.config
    run_dir = _prepare_run_dir(resolved, run_dir)
    records = load_annotations(annotations or cfg.data.val_annotations, require_masks=True)
    model = load_model(checkpoint, s_in=cfg.ram.s_in, device=resolve_device(cfg.device))
    report = evaluate(model, _eval_dataset(records, cfg), cfg.eval, num_workers=cfg.train.num_workers)

    json_path = run_dir / 'eval_report.json'
    json_path.write_text(report.model_dump_json(indent=1))
    table_path = run_dir / 'eval_report.txt'
    table_path.write_text(format_report_table(report) + "\n")
    return EvalResult(report_json=str(json_path), report_table=str(table_path), report=report)


def parse_obb(values: Sequence[float]) -> OrientedBox:
    """8 values are four corners (x1 y1 ... x4 y4); 5 values are cx cy w h theta (radians)."""
    if len(values) == 8:
        return OrientedBox.from_corners(values)
    if len(values) == 5:
        return OrientedBox.from_params(*values)
    raise DomainError(f"An oriented box needs 8 corner values or 5 parameters, got {len(values)}")


def cmd_infer(resolved: ResolvedConfig, checkpoint: str | Path, image_path: str, obb: Sequence[float],
              run_dir: str | Path) -> InferResult:
    """Segments a single instance given by an oriented box and writes its full-image mask as `mask.png`."""
    cfg = resolved.config
    run_dir = _prepare_run_dir(resolved, run_dir)
    image = load_image(image_path)
    h, w = image.shape[:2]
    record = SampleRecord(instance_id='instance', image_id=Path(image_path).stem, image_ref=image,
                          obox=parse_obb(obb), class_label='object', image_size=(w, h))
    dataset = _eval_dataset([record], cfg)
    if len(dataset) == 0:
        raise DataError("The oriented box is degenerate (envelope below one pixel)")
    model = load_model(checkpoint, s_in=cfg.ram.s_in, device=resolve_device(cfg.device))
    sample, mask_patch, score = next(predict_instances(model, dataset, batch_size=1))
    full = back_project(mask_patch, sample.window, (w, h))
    mask_path = save_mask(full, run_dir / 'mask.png')
    return InferResult(mask_path=str(mask_path), score=score, image_size=(w, h), mask_pixels=int(full.sum()))


def _split_missing_images(records: Sequence[SampleRecord]) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    present: Dict[str, bool] = {}
    found, missing = [], []
    for rec in records:
        if isinstance(rec.image_ref, str):
            if rec.image_ref not in present:
                present[rec.image_ref] = Path(rec.image_ref).is_file()
                if not present[rec.image_ref]:
                    logger.warning("Image %s not found, skipping its instances", rec.image_ref)
            if not present[rec.image_ref]:
                missing.append(rec)
                continue
        found.append(rec)
    return found, missing


def cmd_annotate(resolved: ResolvedConfig, checkpoint: str | Path, annotations: str | Path,
                 run_dir: str | Path, tau: Optional[float] = None) -> AnnotateResult:
    """Predicts a mask and a quality score for every box-only instance, exports them with a manifest and
    lists low-scoring instances in `review_flagged.json` (with overlays) for manual filtering."""
    cfg = resolved.config
    tau = cfg.annotate.tau if tau is None else tau
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"tau must be in [0, 1], got {tau}")
    run_dir = _prepare_run_dir(resolved, run_dir)
    records, rejects = load_annotations(annotations, strict=False)
    n_input = len(records) + len(rejects)
    skipped = [SkippedInstance(id=r.instance_id, line=r.line, reason=r.reason) for r in rejects]
    records, missing = _split_missing_images(records)
    skipped.extend(SkippedInstance(id=r.instance_id, reason=f"missing image {r.image_ref}") for r in missing)

    dataset = _eval_dataset(records, cfg)
    kept = {r.instance_id for r in dataset.records}
    skipped.extend(SkippedInstance(id=r.instance_id, reason="degenerate box (envelope below one pixel)")
                   for r in records if r.instance_id not in kept)
    by_id = {r.instance_id: r for r in dataset.records}

    results: List[InstanceResult] = []
    if len(dataset):
        model = load_model(checkpoint, s_in=cfg.ram.s_in, device=resolve_device(cfg.device))
        for sample, mask, score in predict_instances(model, dataset, cfg.eval.batch_size, cfg.train.num_workers):
            image_ref = by_id[sample.instance_id].image_ref
            results.append(InstanceResult(sample, mask, score, image_ref if isinstance(image_ref, str) else None))
    manifest = export_masks(results, run_dir, cfg.annotate.mask_format)

    flagged: List[FlaggedInstance] = []
    for result in results:
        if not needs_review(result.score, tau):
            continue
        sample = result.sample
        entry = FlaggedInstance(id=sample.instance_id, image_id=sample.image_id, class_label=sample.class_label,
                                iou_pred=result.score)
        if cfg.annotate.render_overlays:
            record = by_id[sample.instance_id]
            full = back_project(result.mask_patch, sample.window, sample.image_size)
            canvas = overlay_masks(load_image(record.image_ref), [full], alpha=cfg.annotate.overlay_alpha,
                                   labels=[f"{sample.class_label} {result.score:.2f}"], boxes=[record.obox])
            entry.overlay = str(save_overlay(canvas, run_dir / 'review' / f"{sample.instance_id}.png"))
        flagged.append(entry)

    review = ReviewList(tau=tau, flagged=flagged, skipped=skipped)
    review_path = run_dir / 'review_flagged.json'
    review_path.write_text(review.model_dump_json(indent=1))
    logger.info("Annotated %s of %s instances, %s flagged for review, %s skipped", len(results), n_input,
                len(flagged), len(skipped))
    return AnnotateResult(manifest=str(manifest), review_list=str(review_path), n_input=n_input,
                          n_instances=len(results), n_flagged=len(flagged), n_skipped=len(skipped), review=review)


def cmd_visualize(resolved: ResolvedConfig, manifest: str | Path, out_dir: str | Path,
                  alpha: Optional[float] = None) -> VisualizeResult:
    """Renders one overlay per image of an export manifest; `alpha` defaults to `annotate.overlay_alpha`."""
    alpha = resolved.config.annotate.overlay_alpha if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    out_dir = _prepare_run_dir(resolved, out_dir)
    return VisualizeResult(overlays=[str(p) for p in render_manifest(manifest, out_dir, alpha)])


def cmd_ablate(resolved: ResolvedConfig, run_dir: str | Path, seeds: Sequence[int],
               observer: Optional[TrainingObserver] = None) -> AblationResult:
    """Trains and evaluates with and without edge supervision for every seed; writes `ablation.json`."""
    if not seeds:
        raise DomainError("Ablation needs at least one seed")
    run_dir = _prepare_run_dir(resolved, run_dir)
    runs: List[AblationRun] = []
    for edge_supervision in (True, False):
        for seed in seeds:
            cfg = resolved.config.model_copy(deep=True)
            cfg.seed = seed
            cfg.train.seed = None
            cfg.train.loss.edge_supervision = edge_supervision
            provenance = dict(resolved.provenance, **{'seed': 'flag', 'train.seed': 'flag',
                                                      'train.loss.edge_supervision': 'flag'})
            sub_dir = run_dir / f"edge_{'on' if edge_supervision else 'off'}" / f"seed_{seed}"
            write_run_config(ResolvedConfig(config=cfg, provenance=provenance), sub_dir)
            logger.info("Ablation run: edge supervision %s, seed %s", edge_supervision, seed)
            fit_result = _train_model(cfg, sub_dir, observer=observer)
            best = load_model(fit_result.best_checkpoint, s_in=cfg.ram.s_in, device=resolve_device(cfg.device))
            records = load_annotations(cfg.data.val_annotations, require_masks=True)
            report = evaluate(best, _eval_dataset(records, cfg), cfg.eval, num_workers=cfg.train.num_workers)
            runs.append(AblationRun(edge_supervision=edge_supervision, seed=seed, miou=report.miou,
                                    mbiou=report.mbiou, run_dir=str(sub_dir)))

    mean = {}
    for edge_supervision in (True, False):
        selected = [r for r in runs if r.edge_supervision == edge_supervision]
        mean['edge_on' if edge_supervision else 'edge_off'] = {
            'miou': float(np.mean([r.miou for r in selected])),
            'mbiou': float(np.mean([r.mbiou for r in selected])),
        }
    path = run_dir / 'ablation.json'
    with open(path, 'w') as f:
        json.dump({'runs': [r.model_dump() for r in runs], 'mean': mean}, f, indent=1)
    return AblationResult(path=str(path), runs=runs, mean=mean)
