# activation_maps.py

"""
Class activation maps on the backbone's K x H x W feature grid.

Maps use classifier WEIGHTS only. A per-class bias is constant over the grid
and would vanish under min-max normalization anyway.
"""

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from dataset_manager import BBox

Head = Union[nn.Linear, torch.Tensor]


@dataclass
class ActivationMap:
    values: torch.Tensor
    source: str
    normalized: bool = False
    degenerate: bool = False
    empty: bool = False


@dataclass
class RegionMask:
    """Box on the H x W grid (x = column, y = row). box is None when empty."""
    box: Optional[BBox]
    threshold: float
    height: int
    width: int

    @property
    def empty(self) -> bool:
        return self.box is None

    def as_tensor(self, like: torch.Tensor) -> torch.Tensor:
        mask = torch.zeros(self.height, self.width, dtype=like.dtype, device=like.device)
        if self.box is None:
            return mask
        x, y, w, h = (int(v) for v in (self.box.x, self.box.y, self.box.w, self.box.h))
        mask[y:y + h, x:x + w] = 1
        return mask


def _weights(head: Head) -> torch.Tensor:
    return head.weight if isinstance(head, nn.Module) else head


def class_map(fmap: torch.Tensor, head: Head, c: int) -> ActivationMap:
    """M_c[a, b] = sum_k w[c, k] * fmap[k, a, b]."""
    w = _weights(head)
    if not 0 <= c < w.shape[0]:
        raise ValueError(f"class index {c} out of range for {w.shape[0]} classes")
    return ActivationMap(torch.einsum("k,khw->hw", w[c], fmap), source=f"class:{c}")


def merged_map(fmap: torch.Tensor, head: Head, active_classes: Iterable[int]) -> ActivationMap:
    """Sum of the class maps of every active class; the empty sum is a zero map."""
    active = sorted(set(int(c) for c in active_classes))
    if not active:
        return ActivationMap(fmap.new_zeros(fmap.shape[-2:]), source="merged", empty=True)
    w = _weights(head)
    return ActivationMap(torch.einsum("ck,khw->hw", w[active], fmap), source="merged")


def localization_map(fmap: torch.Tensor, head_global: Head, head_rv: Head, c: int) -> ActivationMap:
    """Class map under the average of the global and region-verification weights."""
    w = 0.5 * (_weights(head_global)[c] + _weights(head_rv)[c])
    return ActivationMap(torch.einsum("k,khw->hw", w, fmap), source=f"localization:{c}")


def normalize(amap: ActivationMap) -> ActivationMap:
    """Min-max scale to [0, 1]; a constant map becomes all zeros and is flagged degenerate."""
    values = amap.values
    lo, hi = values.min(), values.max()
    if not bool(hi > lo):
        return ActivationMap(torch.zeros_like(values), amap.source, normalized=True,
                             degenerate=True, empty=amap.empty)
    return ActivationMap((values - lo) / (hi - lo), amap.source, normalized=True, empty=amap.empty)


def extract_box(amap: ActivationMap, threshold: float = 0.8) -> RegionMask:
    """Tight rectangle around every cell strictly above threshold."""
    if not amap.normalized:
        raise ValueError("extract_box expects a normalized map")
    h, w = amap.values.shape
    rows, cols = torch.nonzero(amap.values > threshold, as_tuple=True)
    if len(rows) == 0:
        return RegionMask(None, threshold, h, w)
    y0, y1 = int(rows.min()), int(rows.max())
    x0, x1 = int(cols.min()), int(cols.max())
    return RegionMask(BBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1), threshold, h, w)


def mask_features(fmap: torch.Tensor, mask: RegionMask) -> torch.Tensor:
    """
    Zero every channel outside the box. An empty mask keeps the full map so
    the region branch still sees features.
    """
    if mask.empty:
        return fmap
    return fmap * mask.as_tensor(fmap)


@torch.no_grad()
def region_masks(fmap: torch.Tensor, head: Head, active_sets: Sequence[Sequence[int]],
                 threshold: float = 0.8) -> torch.Tensor:
    """
    One 0/1 grid per image from its merged, normalized, thresholded map.

    fmap is (N, K, H, W). Images with no active class or an empty region get
    an all-ones grid. The box is an index set, so no gradient flows through
    its placement.
    """
    n, _, h, w = fmap.shape
    masks = torch.ones(n, h, w, dtype=fmap.dtype, device=fmap.device)
    weights = _weights(head).detach()
    for i, active in enumerate(active_sets):
        if not len(active):
            continue
        region = extract_box(normalize(merged_map(fmap[i].detach(), weights, active)), threshold)
        if not region.empty:
            masks[i] = region.as_tensor(fmap)
    return masks


def upsample(amap: ActivationMap, size: int) -> np.ndarray:
    values = amap.values.detach().to(torch.float64)[None, None]
    return F.interpolate(values, size=(size, size), mode="bilinear", align_corners=False)[0, 0].cpu().numpy()


def predict_boxes(amap: ActivationMap, threshold: float, image_size: int) -> List[BBox]:
    """
    Upsample the normalized map bilinearly to the image, threshold it, and
    return the tight box of every 8-connected component, largest first.
    """
    if not amap.normalized:
        raise ValueError("predict_boxes expects a normalized map")
    return boxes_from_heat(upsample(amap, image_size), threshold)


def boxes_from_heat(heat: np.ndarray, threshold: float) -> List[BBox]:
    """Component boxes of an image-resolution heat map, largest first."""
    labeled, n = ndimage.label(heat > threshold, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return []
    sizes = np.bincount(labeled.ravel())[1:]
    found = []
    for k, sl in enumerate(ndimage.find_objects(labeled)):
        ys, xs = sl
        box = BBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start)
        found.append((-int(sizes[k]), ys.start, xs.start, box))
    found.sort(key=lambda t: t[:3])
    return [box for *_, box in found]
