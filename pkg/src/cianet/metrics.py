"""Instance-level evaluation: aggregated Jaccard index and detection F1.

The AJI follows the aggregated-cardinality formula literally: every
ground-truth instance independently selects its best-IoU prediction
(ties by lower prediction label, exact rational comparison), matched
intersections/unions aggregate, and predictions never selected by any
ground truth add their area to the denominator. A "mark-used" variant,
where a prediction can be claimed at most once, is available for
cross-checking.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .util import canonical_json


def _areas(labels):
    counts = np.bincount(np.asarray(labels).reshape(-1))
    return {lab: int(c) for lab, c in enumerate(counts) if lab != 0 and c > 0}


def _intersections(gt, pred):
    """dict gt_label -> dict pred_label -> overlap pixel count."""
    mask = (gt > 0) & (pred > 0)
    table = {}
    if mask.any():
        pairs, counts = np.unique(
            np.stack([gt[mask].astype(np.int64), pred[mask].astype(np.int64)]),
            axis=1,
            return_counts=True,
        )
        for (g, p), c in zip(pairs.T, counts):
            table.setdefault(int(g), {})[int(p)] = int(c)
    return table


def aji(gt, pred, mark_used=False):
    """Aggregated Jaccard index of two instance label maps.

    With ``mark_used`` each prediction is removed from candidacy once
    selected (the widely used variant); by default the literal per-GT
    argmax is computed, which may select one prediction several times.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeError("height", f"label map shapes differ: {gt.shape} vs {pred.shape}")
    gt_area = _areas(gt)
    pred_area = _areas(pred)
    inter = _intersections(gt, pred)

    num = 0
    den = 0
    selected = set()
    for g in sorted(gt_area):
        best = None  # (I, U, pred_label)
        for p in sorted(inter.get(g, {})):
            if mark_used and p in selected:
                continue
            i = inter[g][p]
            u = gt_area[g] + pred_area[p] - i
            # exact IoU comparison: i/u > bi/bu  <=>  i*bu > bi*u
            if best is None or i * best[1] > best[0] * u:
                best = (i, u, p)
        if best is None:
            den += gt_area[g]
        else:
            num += best[0]
            den += best[1]
            selected.add(best[2])
    for p, area in pred_area.items():
        if p not in selected:
            den += area
    if den == 0:
        return 1.0
    return num / den


def f1_detection(gt, pred, iou_threshold=0.5):
    """Greedy one-to-one detection matching at an IoU threshold.

    Returns (precision, recall, f1). Precision is 0 by convention when
    there are no predictions, recall 0 when there is no ground truth,
    and f1 is 0 when precision + recall is 0.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeError("height", f"label map shapes differ: {gt.shape} vs {pred.shape}")
    gt_area = _areas(gt)
    pred_area = _areas(pred)
    inter = _intersections(gt, pred)

    candidates = []
    for g, row in inter.items():
        for p, i in row.items():
            u = gt_area[g] + pred_area[p] - i
            if i / u >= iou_threshold:
                candidates.append((i / u, g, p))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    matched_g, matched_p = set(), set()
    for _, g, p in candidates:
        if g not in matched_g and p not in matched_p:
            matched_g.add(g)
            matched_p.add(p)
    tp = len(matched_g)
    precision = tp / len(pred_area) if pred_area else 0.0
    recall = tp / len(gt_area) if gt_area else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # dicts: image, split, aji, precision, recall, f1
    missing: list = field(default_factory=list)

    def add(self, image, split, gt, pred, iou_threshold=0.5, mark_used=False):
        p, r, f1 = f1_detection(gt, pred, iou_threshold)
        self.rows.append(
            {
                "image": image,
                "split": split,
                "aji": aji(gt, pred, mark_used=mark_used),
                "precision": p,
                "recall": r,
                "f1": f1,
                "gt_instances": int(len(_areas(gt))),
                "pred_instances": int(len(_areas(pred))),
            }
        )

    def split_means(self):
        means = {}
        for split in sorted({r["split"] for r in self.rows}):
            rows = [r for r in self.rows if r["split"] == split]
            means[split] = {
                "n_images": len(rows),
                "aji": float(np.mean([r["aji"] for r in rows])),
                "precision": float(np.mean([r["precision"] for r in rows])),
                "recall": float(np.mean([r["recall"] for r in rows])),
                "f1": float(np.mean([r["f1"] for r in rows])),
            }
        return means

    def overall(self):
        if not self.rows:
            return {"n_images": 0, "aji": 0.0, "precision": 0.0, "recall": 0.0, "f1": 0.0}
        return {
            "n_images": len(self.rows),
            "aji": float(np.mean([r["aji"] for r in self.rows])),
            "precision": float(np.mean([r["precision"] for r in self.rows])),
            "recall": float(np.mean([r["recall"] for r in self.rows])),
            "f1": float(np.mean([r["f1"] for r in self.rows])),
        }

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("image,split,aji,precision,recall,f1\n")
            for r in self.rows:
                f.write(
                    f"{r['image']},{r['split']},{r['aji']:.6f},"
                    f"{r['precision']:.6f},{r['recall']:.6f},{r['f1']:.6f}\n"
                )

    def write_json(self, path):
        payload = {
            "overall": self.overall(),
            "split_means": self.split_means(),
            "missing": list(self.missing),
            "images": self.rows,
        }
        with open(path, "w") as f:
            f.write(canonical_json(payload))

    def summary(self):
        return {"overall": self.overall(), "split_means": self.split_means(), "missing": list(self.missing)}


def evaluate_corpus(corpus_dir, pred_dir, manifest, split=None, iou_threshold=0.5, mark_used=False):
    """Compare predicted instance maps against corpus ground truth.

    Predictions live in ``pred_dir`` under the basename of each sample's
    label file. Missing predictions are listed in the report and the
    image is excluded from the aggregates.
    """
    from .data import read_labels_png  # local import to avoid cycle

    report = MetricsReport()
    entries = [e for e in manifest["samples"] if split is None or e["split"] == split]
    if not entries:
        raise DataError(f"no samples for split {split!r}")
    for entry in entries:
        name = os.path.basename(entry["labels"])
        pred_path = os.path.join(str(pred_dir), name)
        if not os.path.exists(pred_path):
            report.missing.append(name)
            continue
        gt = read_labels_png(os.path.join(str(corpus_dir), entry["labels"]))
        pred = read_labels_png(pred_path)
        report.add(os.path.splitext(name)[0], entry["split"], gt, pred,
                   iou_threshold=iou_threshold, mark_used=mark_used)
    return report
