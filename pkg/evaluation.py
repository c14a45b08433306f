# evaluation.py

"""
Classification and localization metrics and the report files built from them.

Classification is scored with per-class ROC AUC. Localization is scored per
class as the share of GT-boxed images whose top predicted box has IoU > T
with one of that class's GT boxes. The per-class CAM threshold that turns a
heat map into a box is picked by k-fold cross-validation on the evaluation
images themselves.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.stats import rankdata

import activation_maps as cam
from dataset_manager import BBox, Sample, stack_images
from embedding_model import infer_batched
from settings import DEFAULT_LOC_THRESHOLD, IOU_THRESHOLDS

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.4f"
THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = IOU_THRESHOLDS
    cv_folds: int = 10
    cv_iou: float = 0.3
    default_threshold: float = DEFAULT_LOC_THRESHOLD
    seed: int = 0
    score: str = "fused"
    average_logits: bool = False
    batch_size: int = 128

    def __post_init__(self):
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if any(not 0 <= t < 1 for t in self.iou_thresholds):
            raise ValueError(f"IoU thresholds must lie in [0, 1): {self.iou_thresholds}")
        if self.cv_folds < 2:
            raise ValueError(f"cross-validation needs at least 2 folds, got {self.cv_folds}")
        if self.score not in ("fused", "global"):
            raise ValueError(f"score must be 'fused' or 'global', got {self.score!r}")


# ---------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------
def auc_roc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """
    Mann-Whitney AUC with ties counted one half. Returns None when the labels
    hold only one class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc(scores: np.ndarray, labels: np.ndarray) -> List[Optional[float]]:
    return [auc_roc(scores[:, c], labels[:, c]) for c in range(labels.shape[1])]


def mean_of_defined(values: Sequence[Optional[float]]) -> float:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else float("nan")


def mean_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    return mean_of_defined(per_class_auc(scores, labels))


def class_scores(samples: Sequence[Sample], model, config: EvalConfig) -> np.ndarray:
    probs = infer_batched(stack_images(samples), model, config.batch_size,
                          average_logits=config.average_logits)
    key = "p_total" if config.score == "fused" else "p_global"
    return probs[key].numpy()


def evaluate_classification(samples: Sequence[Sample], model, config: EvalConfig,
                            class_names: Sequence[str]) -> List[Optional[float]]:
    labels = np.stack([s.labels for s in samples])
    aucs = per_class_auc(class_scores(samples, model, config), labels)
    for name, auc in zip(class_names, aucs):
        if auc is None:
            logger.warning(f"AUC undefined for {name}: only one label value present; left out of the mean")
    return aucs


# ---------------------------------------------------------------------
# Localization
# ---------------------------------------------------------------------
def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


def is_correct(pred: Optional[BBox], gt_boxes: Sequence[BBox], threshold: float) -> bool:
    """IoU > threshold against the best-matching GT box; no prediction is wrong."""
    if pred is None:
        return False
    return max((iou(pred, g) for g in gt_boxes), default=0.0) > threshold


def localization_accuracy(predictions: Mapping[Tuple[str, int], Optional[BBox]],
                          gt_boxes: Mapping[Tuple[str, int], Sequence[BBox]],
                          threshold: float) -> Dict[int, float]:
    """
    Per-class accuracy over the (image, class) pairs that have GT boxes.
    Classes without any GT image do not appear in the result.
    """
    hits: Dict[int, List[bool]] = {}
    for (sample_id, c), boxes in gt_boxes.items():
        if not boxes:
            continue
        hits.setdefault(c, []).append(is_correct(predictions.get((sample_id, c)), boxes, threshold))
    return {c: float(np.mean(h)) for c, h in sorted(hits.items())}


@dataclass
class LocalizationCase:
    """One (image, class) pair with GT boxes and its image-resolution heat map."""
    sample_id: str
    class_index: int
    gt_boxes: List[BBox]
    heat: np.ndarray = field(repr=False)
    degenerate: bool = False

    def predict(self, threshold: float) -> Optional[BBox]:
        boxes = cam.boxes_from_heat(self.heat, threshold)
        return boxes[0] if boxes else None


@torch.no_grad()
def localization_cases(samples: Sequence[Sample], model, use_region_head: bool = True,
                       batch_size: int = 64) -> List[LocalizationCase]:
    """
    Heat maps for every GT-boxed (image, class) pair. With use_region_head the
    map uses the averaged global and region weights, otherwise the global
    weights alone.
    """
    boxed = [s for s in samples if s.gt_boxes]
    cases = []
    model.eval()
    for start in range(0, len(boxed), batch_size):
        chunk = boxed[start:start + batch_size]
        fmap = model.forward_backbone(stack_images(chunk))
        for i, sample in enumerate(chunk):
            size = sample.image.shape[-1]
            for c in sorted({c for c, _ in sample.gt_boxes}):
                if use_region_head:
                    amap = cam.localization_map(fmap[i], model.head_global, model.head_rv, c)
                else:
                    amap = cam.class_map(fmap[i], model.head_global, c)
                amap = cam.normalize(amap)
                cases.append(LocalizationCase(sample.sample_id, c, sample.boxes_for(c),
                                              cam.upsample(amap, size), amap.degenerate))
    return cases


def predictions_at(cases: Sequence[LocalizationCase],
                   thresholds: Mapping[int, float]) -> Dict[Tuple[str, int], Optional[BBox]]:
    return {(k.sample_id, k.class_index): k.predict(thresholds.get(k.class_index, DEFAULT_LOC_THRESHOLD))
            for k in cases}


def gt_of(cases: Sequence[LocalizationCase]) -> Dict[Tuple[str, int], List[BBox]]:
    return {(k.sample_id, k.class_index): k.gt_boxes for k in cases}


@dataclass
class ThresholdChoice:
    class_index: int
    threshold: float
    heldout_accuracy: float = float("nan")
    fold_thresholds: List[float] = field(default_factory=list)
    heldin_accuracies: List[float] = field(default_factory=list)
    fallback: bool = False
    # sample id -> threshold picked by the fold that held the sample out
    heldout_thresholds: Dict[str, float] = field(default_factory=dict)

    def threshold_for(self, sample_id: str) -> float:
        return self.heldout_thresholds.get(sample_id, self.threshold)


def _correctness(cases: Sequence[LocalizationCase], iou_threshold: float) -> np.ndarray:
    """(n_cases, n_grid) matrix: is the box at each grid threshold correct?"""
    out = np.zeros((len(cases), len(THRESHOLD_GRID)), dtype=bool)
    for i, case in enumerate(cases):
        for j, t in enumerate(THRESHOLD_GRID):
            out[i, j] = is_correct(case.predict(t), case.gt_boxes, iou_threshold)
    return out


def select_loc_thresholds(cases: Sequence[LocalizationCase], folds: int = 10,
                          iou_threshold: float = 0.3, seed: int = 0,
                          default: float = DEFAULT_LOC_THRESHOLD) -> Dict[int, ThresholdChoice]:
    """
    Per class: on each fold pick the grid threshold with the best held-in
    accuracy (lowest threshold on ties), score it on the held-out fold, and
    keep the most frequent pick (again lowest on ties).
    """
    if folds < 2:
        raise ValueError(f"cross-validation needs at least 2 folds, got {folds}")
    by_class: Dict[int, List[LocalizationCase]] = {}
    for case in cases:
        by_class.setdefault(case.class_index, []).append(case)

    choices = {}
    for c in sorted(by_class):
        members = by_class[c]
        if len(members) < folds:
            logger.warning(f"Class {c}: {len(members)} boxed images for {folds} folds; "
                           f"using default threshold {default}")
            choices[c] = ThresholdChoice(c, default, fallback=True)
            continue

        correct = _correctness(members, iou_threshold)
        order = np.random.default_rng([seed, c]).permutation(len(members))
        picks, heldout, heldin = [], [], []
        applied = {}
        for held_out in np.array_split(order, folds):
            held_in = np.setdiff1d(order, held_out)
            acc_in = correct[held_in].mean(axis=0)
            g = int(np.argmax(acc_in))
            picks.append(g)
            applied.update({members[k].sample_id: THRESHOLD_GRID[g] for k in held_out})
            heldin.append(float(acc_in[g]))
            heldout.append(float(correct[held_out, g].mean()))
        final = int(np.argmax(np.bincount(picks, minlength=len(THRESHOLD_GRID))))
        choices[c] = ThresholdChoice(c, THRESHOLD_GRID[final], float(np.mean(heldout)),
                                     [THRESHOLD_GRID[g] for g in picks], heldin,
                                     heldout_thresholds=applied)
        logger.info(f"Class {c}: threshold {THRESHOLD_GRID[final]} "
                    f"(held-out accuracy {np.mean(heldout):.3f})")
    return choices


def evaluate_localization(cases: Sequence[LocalizationCase], thresholds: Mapping[int, float],
                          iou_thresholds: Sequence[float] = IOU_THRESHOLDS) -> Dict[float, Dict[int, float]]:
    predictions = predictions_at(cases, thresholds)
    gt = gt_of(cases)
    return {t: localization_accuracy(predictions, gt, t) for t in iou_thresholds}


def evaluate_localization_cv(cases: Sequence[LocalizationCase], choices: Mapping[int, ThresholdChoice],
                             iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
                             default: float = DEFAULT_LOC_THRESHOLD) -> Dict[float, Dict[int, float]]:
    """
    Accuracy table where every case is boxed with the threshold its own
    held-out fold received, so no case is scored with a threshold it helped
    choose. Fallback classes use their single threshold.
    """
    predictions = {}
    for k in cases:
        choice = choices.get(k.class_index)
        t = choice.threshold_for(k.sample_id) if choice else default
        predictions[(k.sample_id, k.class_index)] = k.predict(t)
    gt = gt_of(cases)
    return {t: localization_accuracy(predictions, gt, t) for t in iou_thresholds}


# ---------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------
@dataclass
class EvalReport:
    class_names: List[str]
    auc: List[Optional[float]] = field(default_factory=list)
    localization: Dict[float, Dict[int, float]] = field(default_factory=dict)
    thresholds: Dict[int, ThresholdChoice] = field(default_factory=dict)
    config: Dict = field(default_factory=dict)
    references: Dict[str, float] = field(default_factory=dict)

    @property
    def mean_auc(self) -> float:
        return mean_of_defined(self.auc)

    def mean_localization(self, t: float) -> float:
        return mean_of_defined(list(self.localization.get(t, {}).values()))


def auc_frame(report: EvalReport) -> pd.DataFrame:
    rows = [{"source": "measured", "class": name, "auc": auc}
            for name, auc in zip(report.class_names, report.auc)]
    if rows:
        rows.append({"source": "measured", "class": "mean", "auc": report.mean_auc})
    for name in sorted(report.references):
        rows.append({"source": "reference", "class": name, "auc": report.references[name]})
    return pd.DataFrame(rows, columns=["source", "class", "auc"]).astype({"auc": float})


def localization_frame(report: EvalReport) -> pd.DataFrame:
    ts = sorted(report.localization)
    columns = ["class"] + [f"T={t:g}" for t in ts]
    classes = sorted({c for accs in report.localization.values() for c in accs})
    rows = []
    for c in classes:
        row = {"class": report.class_names[c]}
        row.update({f"T={t:g}": report.localization[t].get(c) for t in ts})
        rows.append(row)
    if rows:
        mean = {"class": "mean"}
        mean.update({f"T={t:g}": report.mean_localization(t) for t in ts})
        rows.append(mean)
    return pd.DataFrame(rows, columns=columns).astype({col: float for col in columns[1:]})


def thresholds_frame(report: EvalReport) -> pd.DataFrame:
    rows = [{"class": report.class_names[c], "class_index": c, "threshold": ch.threshold,
             "heldout_accuracy": ch.heldout_accuracy, "fallback": ch.fallback}
            for c, ch in sorted(report.thresholds.items())]
    return pd.DataFrame(rows, columns=["class", "class_index", "threshold", "heldout_accuracy", "fallback"])


def read_thresholds(path: str) -> Dict[int, float]:
    frame = pd.read_csv(path)
    return {int(r.class_index): float(r.threshold) for r in frame.itertuples()}


def emit_report(report: EvalReport, out_dir: str, name: str = "report") -> List[str]:
    """
    Write the report tables as CSV plus a plain-text rendering <name>.txt and
    the config echo <name>_config.json. Returns the paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    text = []

    def write(frame: pd.DataFrame, file_name: str, title: str):
        path = os.path.join(out_dir, file_name)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path)
        body = frame.to_string(index=False, float_format=lambda v: FLOAT_FORMAT % v) if len(frame) else "(empty)"
        text.extend([title, body, ""])

    if report.auc or report.references:
        write(auc_frame(report), "auc.csv", "Classification AUC")
    if report.localization:
        write(localization_frame(report), "localization.csv", "Localization accuracy (IoU > T)")
    if report.thresholds:
        write(thresholds_frame(report), "thresholds.csv", "Per-class CAM thresholds")
    if not written:
        write(auc_frame(report), "auc.csv", "Classification AUC")

    txt_path = os.path.join(out_dir, f"{name}.txt")
    with open(txt_path, "w") as f:
        f.write("\n".join(text))
    written.append(txt_path)

    cfg_path = os.path.join(out_dir, f"{name}_config.json")
    with open(cfg_path, "w") as f:
        json.dump(report.config, f, indent=2, sort_keys=True, default=str)
    written.append(cfg_path)
    return written


def config_echo(config: EvalConfig) -> Dict:
    return asdict(config)
