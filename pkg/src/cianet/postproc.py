"""Probability maps -> instance label maps.

The contour map is subtracted from the nuclei map, the difference is
thresholded, connected components become instance seeds, small seeds are
dropped, and (optionally) each instance grows back outward by a bounded
Chebyshev radius to undo the shrinkage that contour-subtracted training
targets introduce. Growth never claims pixels where the nuclei
probability is below 0.5 and never overwrites another instance.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError, ShapeError


@dataclass
class PostConfig:
    threshold: float = 0.3
    connectivity: int = 8
    min_area: int = 5
    post_dilation_radius: int = 2
    dilation_enabled: bool = True

    def __post_init__(self):
        if not -1.0 < self.threshold < 1.0:
            raise ContractError(f"threshold must be in (-1, 1), got {self.threshold}")
        if self.connectivity not in (4, 8):
            raise ContractError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.min_area < 0 or self.post_dilation_radius < 0:
            raise ContractError("min_area and post_dilation_radius must be >= 0")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


_STEPS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_STEPS_8 = _STEPS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def connected_components(binary, connectivity=8):
    """Label maximal connected regions 1..n in raster-scan discovery order."""
    if connectivity == 4:
        steps = _STEPS_4
    elif connectivity == 8:
        steps = _STEPS_8
    else:
        raise ContractError(f"connectivity must be 4 or 8, got {connectivity}")
    binary = np.asarray(binary, dtype=bool)
    h, w = binary.shape
    labels = np.zeros((h, w), dtype=np.int32)
    label = 0
    for sy in range(h):
        for sx in range(w):
            if not binary[sy, sx] or labels[sy, sx]:
                continue
            label += 1
            queue = deque([(sy, sx)])
            labels[sy, sx] = label
            while queue:
                y, x = queue.popleft()
                for dy, dx in steps:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = label
                        queue.append((ny, nx))
    return labels


def relabel_sequential(labels):
    """Compress labels to 1..n, ascending by old label value."""
    labels = np.asarray(labels)
    out = np.zeros_like(labels, dtype=np.int32)
    for new, old in enumerate(lab for lab in np.unique(labels) if lab != 0):
        out[labels == old] = new + 1
    return out


def dilate_instances(instances, radius, barrier=None):
    """Grow every instance by up to ``radius`` Chebyshev steps.

    Multi-source breadth-first growth: each background pixel joins the
    instance whose support is nearest, ties going to the lower label.
    ``barrier`` pixels (boolean mask) are never claimed; existing labels
    are never overwritten, so instances cannot merge.
    """
    lab = np.asarray(instances).astype(np.int32).copy()
    if radius <= 0:
        return lab
    blocked = np.zeros(lab.shape, dtype=bool) if barrier is None else np.asarray(barrier, dtype=bool)
    sentinel = np.iinfo(np.int32).max
    for _ in range(int(radius)):
        occupied = lab > 0
        fld = np.where(occupied, lab, sentinel)
        cand = ndimage.minimum_filter(fld, size=3, mode="constant", cval=sentinel)
        newly = ~occupied & ~blocked & (cand < sentinel)
        if not newly.any():
            break
        lab[newly] = cand[newly]
    return lab


def extract_instances(p_nuclei, p_contour, cfg: PostConfig):
    """Subtract, threshold, label, size-filter and optionally re-grow."""
    p_nuclei = np.asarray(p_nuclei, dtype=np.float32)
    p_contour = np.asarray(p_contour, dtype=np.float32)
    if p_nuclei.shape != p_contour.shape:
        raise ShapeError("height", f"map shapes differ: {p_nuclei.shape} vs {p_contour.shape}")
    marker = p_nuclei - p_contour
    labels = connected_components(marker > cfg.threshold, cfg.connectivity)
    if cfg.min_area > 0 and labels.max() > 0:
        areas = np.bincount(labels.reshape(-1))
        small = np.flatnonzero(areas < cfg.min_area)
        labels[np.isin(labels, small[small > 0])] = 0
        labels = relabel_sequential(labels)
    if cfg.dilation_enabled and cfg.post_dilation_radius > 0:
        labels = dilate_instances(labels, cfg.post_dilation_radius, barrier=p_nuclei < 0.5)
    return labels
