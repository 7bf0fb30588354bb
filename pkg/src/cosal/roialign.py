"""RoIAlign: bilinear region pooling onto a fixed bin grid, with backward."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import to_corners


@dataclass(frozen=True)
class RoiSpec:
    bins_h: int = 7
    bins_w: int = 7
    samples: int = 2          # per bin side: 2 -> 2x2 quarter-point samples
    aggregation: str = "average"

    def __post_init__(self):
        if self.bins_h < 1 or self.bins_w < 1 or self.samples < 1:
            raise ValueError(f"invalid RoiSpec {self}")
        if self.aggregation not in ("average", "max"):
            raise ValueError(f"aggregation must be 'average' or 'max', got {self.aggregation!r}")

    @property
    def use_max(self):
        return self.aggregation == "max"


def _corner_boxes(boxes):
    b = np.reshape(np.asarray(boxes, dtype=np.float64), (-1, 4))
    if np.any(b[:, 2] <= 0) or np.any(b[:, 3] <= 0):
        raise ValueError("roi_align: degenerate box (w <= 0 or h <= 0)")
    return to_corners(b)


def roi_align_many(feature, boxes, spec=RoiSpec()):
    """Pool ``K`` boxes (center form, feature coordinates) -> ``(K, C, Bh, Bw)``.

    Returns the pooled tensor and an argmax array that ``roi_align_many_backward``
    needs for max aggregation.
    """
    if feature.ndim != 3 or feature.size == 0:
        raise ValueError(f"roi_align: feature must be non-empty (C, H, W), got {feature.shape}")
    corners = _corner_boxes(boxes)
    return kernels.roi_align_batch(feature, corners, spec.bins_h, spec.bins_w, spec.samples, spec.use_max)


def roi_align_many_backward(feature_shape, boxes, spec, upstream, argmax=None):
    corners = _corner_boxes(boxes)
    k = len(corners)
    expected = (k, feature_shape[0], spec.bins_h, spec.bins_w)
    if upstream.shape != expected:
        raise ValueError(f"roi_align_backward: upstream {upstream.shape} != {expected}")
    if argmax is None:
        argmax = np.zeros(expected, dtype=np.int32)
    return kernels.roi_align_batch_backward(upstream, argmax, corners, tuple(feature_shape),
                                            spec.samples, spec.use_max)


def roi_align(feature, box, spec=RoiSpec()):
    """Single box -> ``(C, Bh, Bw)``."""
    out, _ = roi_align_many(feature, [box], spec)
    return out[0]


def roi_align_backward(feature_shape, box, spec, upstream, feature=None):
    """Single-box backward. Max aggregation needs ``feature`` to recover the argmax."""
    argmax = None
    if spec.use_max:
        if feature is None:
            raise ValueError("roi_align_backward: max aggregation needs the forward feature map")
        _, argmax = roi_align_many(feature, [box], spec)
    return roi_align_many_backward(feature_shape, [box], spec, upstream[None], argmax)
