"""Reconstruction and object-discovery metrics: PSNR, foreground IoU,
per-sprite precision/recall under greedy one-to-one matching, and
segmentation by sprite selection."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .dataset import SyntheticScene
from .model import Decomposition, SpriteModel, frames_to_tensor

PSNR_CAP = 99.0


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """10*log10(1/MSE) for arrays in [0, 1]; exact matches cap at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def foreground_iou(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """Intersection over union of boolean masks; two empty masks give 1."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    truth_mask = np.asarray(truth_mask, dtype=bool)
    if pred_mask.shape != truth_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {truth_mask.shape}")
    union = np.logical_or(pred_mask, truth_mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred_mask, truth_mask).sum() / union)


def sprite_precision_recall(pred_masks: list[np.ndarray], truth_masks: list[np.ndarray],
                            tau: float = 0.5) -> tuple[float, float]:
    """Greedy one-to-one matching in descending pairwise IoU; pairs with
    IoU >= tau count as true positives. Empty prediction (or truth) sets use
    the convention precision (recall) = 1."""
    pairs = []
    for i, pm in enumerate(pred_masks):
        for j, tm in enumerate(truth_masks):
            iou = foreground_iou(pm, tm)
            if iou >= tau and iou > 0:
                pairs.append((iou, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_pred: set[int] = set()
    used_truth: set[int] = set()
    tp = 0
    for _, i, j in pairs:
        if i in used_pred or j in used_truth:
            continue
        used_pred.add(i)
        used_truth.add(j)
        tp += 1
    precision = 1.0 if not pred_masks else tp / len(pred_masks)
    recall = 1.0 if not truth_masks else tp / len(truth_masks)
    return precision, recall


def placement_mask(placement, patches_u8_alpha: np.ndarray, k: int,
                   height: int, width: int) -> np.ndarray:
    """Footprint of one placed sprite: pixels where its alpha >= 0.5."""
    mask = np.zeros((height, width), dtype=bool)
    y0, x0 = geometry.sprite_topleft(placement.row, placement.col, k,
                                     placement.dy, placement.dx)
    ty0, tx0 = max(y0, 0), max(x0, 0)
    ty1, tx1 = min(y0 + k, height), min(x0 + k, width)
    if ty0 >= ty1 or tx0 >= tx1:
        return mask
    alpha = patches_u8_alpha[placement.sprite]
    mask[ty0:ty1, tx0:tx1] = alpha[ty0 - y0 : ty1 - y0, tx0 - x0 : tx1 - x0] >= 0.5
    return mask


def decomposition_masks(decomp: Decomposition, patches_alpha: np.ndarray,
                        height: int, width: int,
                        sprite_ids=None) -> list[tuple[int, np.ndarray]]:
    """(sprite_id, mask) per active placement, optionally restricted to a set
    of sprite ids."""
    out = []
    for p in decomp.placements:
        if not p.active:
            continue
        if sprite_ids is not None and p.sprite not in sprite_ids:
            continue
        out.append((p.sprite, placement_mask(p, patches_alpha, decomp.k, height, width)))
    return out


def segment_by_sprites(decomp: Decomposition, patches_alpha: np.ndarray,
                       selected_ids, height: int, width: int) -> np.ndarray:
    """Union footprint of the placements whose sprite id is selected."""
    m = patches_alpha.shape[0]
    ids = set(int(i) for i in selected_ids)
    for i in ids:
        if not 0 <= i < m:
            raise ValueError(f"unknown sprite id {i} (dictionary has {m})")
    mask = np.zeros((height, width), dtype=bool)
    for _, pm in decomposition_masks(decomp, patches_alpha, height, width, ids):
        mask |= pm
    return mask


@dataclass
class MatchReport:
    """Aggregate metrics; IoU is reported both frame-averaged and pooled over
    the whole corpus (the two differ when foreground area varies per frame)."""

    precision: float
    recall: float
    iou_frame_mean: float
    iou_pooled: float
    psnr: float
    tau: float
    per_frame: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=1))


def evaluate_scenes(model: SpriteModel, scenes: list[SyntheticScene],
                    tau: float = 0.5) -> MatchReport:
    """Hard-decompose each scene and score it against the ground truth."""
    patches_alpha = model.quantized_patches().numpy()[:, 3]
    h, w = model.frame_height, model.frame_width
    per_frame = []
    tps = preds = truths = 0
    inter_sum = union_sum = 0
    psnrs, ious, precisions, recalls = [], [], [], []
    frames_t = frames_to_tensor([s.frame for s in scenes])
    for i, scene in enumerate(scenes):
        recon, decomp = model.reconstruct_hard(frames_t[i], scene.frame.index)
        recon_q = np.round(recon * 255.0) / 255.0
        frame_psnr = psnr(recon_q, scene.frame.pixels.astype(np.float64))
        pred = decomposition_masks(decomp, patches_alpha, h, w)
        pred_masks = [mk for _, mk in pred]
        pred_union = np.zeros((h, w), dtype=bool)
        for mk in pred_masks:
            pred_union |= mk
        truth_union = np.zeros((h, w), dtype=bool)
        for mk in scene.truth_masks:
            truth_union |= mk
        p, r = sprite_precision_recall(pred_masks, scene.truth_masks, tau)
        iou = foreground_iou(pred_union, truth_union)
        inter_sum += np.logical_and(pred_union, truth_union).sum()
        union_sum += np.logical_or(pred_union, truth_union).sum()
        tp_count = round(r * len(scene.truth_masks))
        tps += tp_count
        preds += len(pred_masks)
        truths += len(scene.truth_masks)
        psnrs.append(frame_psnr)
        ious.append(iou)
        precisions.append(p)
        recalls.append(r)
        per_frame.append({"frame": scene.frame.index, "psnr": frame_psnr, "iou": iou,
                          "precision": p, "recall": r,
                          "n_pred": len(pred_masks), "n_truth": len(scene.truth_masks)})
    return MatchReport(
        precision=tps / preds if preds else 1.0,
        recall=tps / truths if truths else 1.0,
        iou_frame_mean=float(np.mean(ious)),
        iou_pooled=float(inter_sum / union_sum) if union_sum else 1.0,
        psnr=float(np.mean(psnrs)),
        tau=tau,
        per_frame=per_frame)


def write_per_frame_csv(report: MatchReport, path: str | Path) -> None:
    import csv

    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["frame", "psnr", "iou", "precision",
                                                "recall", "n_pred", "n_truth"])
        writer.writeheader()
        writer.writerows(report.per_frame)
