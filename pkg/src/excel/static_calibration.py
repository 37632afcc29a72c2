"""Training-free CAM generation from calibrated features and enriched text.

A CAM for class c is the min-max-normalized cosine similarity between
every patch feature column and the class's enriched text embedding.
Pseudo labels come from a dual confidence band: the winning class above
tau_fg, background below tau_bg, ignore (255) in between.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .blobio import load_tensors, save_tensors
from .encoder import (
    EncoderWeights,
    IntraCorrelation,
    LayerTrace,
    VanillaQK,
    ValueValueLast,
    encode,
    self_attention,
)
from .errors import DataError, UsageError
from .text_enrichment import TextRepresentation

IGNORE_LABEL = 255
BACKGROUND_LABEL = 0


@dataclass
class CamStack:
    maps: np.ndarray  # (k, h, w) float32 in [0, 1]
    class_ids: list[int]  # ascending dataset label values
    grid: tuple[int, int]

    def map_for(self, class_id: int) -> np.ndarray:
        return self.maps[self.class_ids.index(class_id)]


PseudoLabelMap = np.ndarray  # (h, w) uint8: class id, 0 background, 255 ignore


def intra_correlation(q: np.ndarray, k: np.ndarray, v: np.ndarray, weights) -> np.ndarray:
    """Weighted sum of the three within-space self-attention maps for one
    head's (T, D_s) projections: w1*SA(q,q) + w2*SA(k,k) + w3*SA(v,v)."""
    q = nm.as_f32(q, "q")
    k = nm.as_f32(k, "k")
    v = nm.as_f32(v, "v")
    if not (q.shape == k.shape == v.shape):
        raise DataError(f"q/k/v shapes differ: {q.shape} {k.shape} {v.shape}")
    if len(weights) != 3:
        raise DataError(f"expected 3 correlation weights, got {len(weights)}")
    head_dim = q.shape[1]
    w1, w2, w3 = (float(w) for w in weights)
    mix = (
        w1 * self_attention(q, head_dim).astype(np.float64)
        + w2 * self_attention(k, head_dim).astype(np.float64)
        + w3 * self_attention(v, head_dim).astype(np.float64)
    )
    return mix.astype(np.float32)


def static_cam(
    patch_features: np.ndarray, bank: TextRepresentation, present: list[int]
) -> CamStack:
    """Per-class normalized cosine maps over the (D, h, w) feature grid for
    the image-level label set `present` (dataset class ids)."""
    patch_features = nm.as_f32(patch_features, "patch features")
    if patch_features.ndim != 3:
        raise DataError(f"patch features must be (D, h, w), got {patch_features.shape}")
    if not present:
        raise DataError("empty present-class set: image-level labels are required")
    dim, h, w = patch_features.shape
    if dim != bank.dim:
        raise DataError(f"feature dim {dim} does not match text bank dim {bank.dim}")
    flat = patch_features.reshape(dim, h * w)
    class_ids = sorted(set(int(c) for c in present))
    maps = np.empty((len(class_ids), h, w), dtype=np.float32)
    for i, cid in enumerate(class_ids):
        column = bank.column_for_class_id(cid)
        sims = nm.cosine_matrix(flat, column[:, None])[:, 0]
        maps[i] = nm.minmax_norm(sims).reshape(h, w)
    return CamStack(maps=maps, class_ids=class_ids, grid=(h, w))


def cam_to_pseudo_label(cams: CamStack, tau_fg: float, tau_bg: float) -> PseudoLabelMap:
    """Confidence-band refinement: winning class >= tau_fg, background
    <= tau_bg, ignore in between. Argmax ties break toward the lower
    class id (class_ids are kept ascending)."""
    if not 0.0 <= tau_bg < tau_fg <= 1.0:
        raise UsageError(f"thresholds must satisfy 0 <= tau_bg < tau_fg <= 1, got bg={tau_bg} fg={tau_fg}")
    scores = cams.maps
    best = scores.argmax(axis=0)
    peak = scores.max(axis=0)
    ids = np.asarray(cams.class_ids, dtype=np.int32)
    labels = np.full(cams.grid, IGNORE_LABEL, dtype=np.uint8)
    labels[peak <= tau_bg] = BACKGROUND_LABEL
    fg = peak >= tau_fg
    labels[fg] = ids[best[fg]].astype(np.uint8)
    return labels


@dataclass
class StaticResult:
    cams: CamStack
    labels: PseudoLabelMap
    trace: LayerTrace


def policy_from_name(name: str, calib_layers: int, calib_weights) -> object:
    if name == "vanilla":
        return VanillaQK()
    if name == "value_value":
        return ValueValueLast()
    if name == "intra_correlation":
        return IntraCorrelation(layers=calib_layers, weights=tuple(calib_weights))
    raise UsageError(f"unknown attention policy '{name}'")


def run_static_pipeline(
    image: np.ndarray,
    weights: EncoderWeights,
    bank: TextRepresentation,
    present: list[int],
    config,
) -> StaticResult:
    """encode -> static_cam -> cam_to_pseudo_label with zero learnable state.

    `config` needs policy, calib_layers, calib_weights, tau_fg, tau_bg.
    """
    policy = policy_from_name(
        getattr(config, "policy", "intra_correlation"),
        config.calib_layers,
        config.calib_weights,
    )
    trace = encode(image, weights, policy)
    cams = static_cam(trace.patch_features, bank, present)
    labels = cam_to_pseudo_label(cams, config.tau_fg, config.tau_bg)
    return StaticResult(cams=cams, labels=labels, trace=trace)


# --------------------------------------------------------------------------
# CAM export


def save_cams(path, cams: CamStack, provenance=None) -> Path:
    tensors = {f"cam.{cid:03d}": cams.maps[i] for i, cid in enumerate(cams.class_ids)}
    meta = {"class_ids": cams.class_ids, "grid": list(cams.grid)}
    return save_tensors(path, tensors, meta=meta, provenance=provenance)


def load_cams(path) -> CamStack:
    tf = load_tensors(path)
    class_ids = [int(c) for c in tf.meta["class_ids"]]
    grid = (int(tf.meta["grid"][0]), int(tf.meta["grid"][1]))
    maps = np.stack([tf.require(f"cam.{cid:03d}", grid) for cid in class_ids], axis=0)
    return CamStack(maps=maps, class_ids=class_ids, grid=grid)
