"""Unsupervised lesion inference by dual-model probability subtraction.

A Covid CT is pushed through both lung models; the voxelwise absolute
difference of the two lung probability maps is the lesion probability map,
thresholded (default 0.3) to a lesion mask. Cropping at inference is two-pass:
pass 1 runs the Covid-trained model on uncropped slices to find the lung
bounding box, pass 2 re-runs both models on box-cropped slices and maps all
outputs back to the original CT geometry.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .network import ModelParams, forward_batch, lung_mask_from_prob
from .preprocess import (
    BoundingBox,
    PreprocessConfig,
    SliceProvenance,
    bounding_box,
    normalize_hu,
    resize_bilinear,
    unresize_to_original,
)
from .volumes import BinaryMask, ProbMap, Volume, read_volume, require_same_geometry

_SLICE_CHUNK = 20


@dataclass(frozen=True)
class LesionConfig:
    tau_lesion: float = 0.3
    tau_lung: float = 0.5
    restrict_to_lung: bool = True
    external_lung_mask: str | None = None

    def __post_init__(self):
        if not 0.0 < self.tau_lesion < 1.0:
            raise DataError(f"tau_lesion must be in (0, 1), got {self.tau_lesion}")
        if not 0.0 < self.tau_lung < 1.0:
            raise DataError(f"tau_lung must be in (0, 1), got {self.tau_lung}")


@dataclass
class LesionResult:
    """All maps in the original CT geometry."""

    lesion_prob: ProbMap
    lesion_mask: BinaryMask
    lung_mask: BinaryMask  # from the Covid-trained model
    prob_covid: ProbMap
    prob_norm: ProbMap
    crop_box: BoundingBox


def subtract_prob_maps(p_covid: ProbMap, p_norm: ProbMap) -> ProbMap:
    """Voxelwise |p_covid - p_norm|; symmetric under model swap."""
    require_same_geometry(p_covid, p_norm, "subtract_prob_maps")
    return ProbMap(p_covid.geometry, np.abs(p_covid.voxels - p_norm.voxels))


def threshold_lesion(prob: ProbMap, cfg: LesionConfig, lung: BinaryMask) -> BinaryMask:
    """Voxels with prob >= tau_lesion, intersected with the lung when restricting."""
    require_same_geometry(prob, lung, "threshold_lesion")
    mask = prob.voxels >= cfg.tau_lesion
    if cfg.restrict_to_lung:
        mask = mask & lung.voxels
    return BinaryMask(prob.geometry, mask)


def mean_prob_gap(p_covid: ProbMap, p_norm: ProbMap, lesion_ref: BinaryMask) -> float:
    """Mean of (p_covid - p_norm) over reference-lesion voxels.

    Positive when the Covid-trained model assigns higher lung probability to
    lesions than the normal-trained model, which is the premise the whole
    subtraction approach rests on.
    """
    require_same_geometry(p_covid, p_norm, "mean_prob_gap")
    require_same_geometry(p_covid, lesion_ref, "mean_prob_gap")
    sel = lesion_ref.voxels
    if not sel.any():
        raise DataError("mean_prob_gap: reference lesion mask is empty")
    diff = p_covid.voxels[sel].astype(np.float64) - p_norm.voxels[sel].astype(np.float64)
    return float(diff.mean())


def _full_box(ct: Volume) -> BoundingBox:
    nx, ny, nz = ct.geometry.dims
    return BoundingBox(0, nx - 1, 0, ny - 1, 0, nz - 1)


def _forward_volume(
    ct: Volume,
    models: list[ModelParams],
    pre_cfg: PreprocessConfig,
    box: BoundingBox | None,
) -> list[ProbMap]:
    """Run each model over the (optionally box-cropped) volume, slice by slice,
    and return lung probability maps in the original geometry (zero outside box)."""
    if box is None:
        box = _full_box(ct)
    normalized = normalize_hu(ct, pre_cfg).voxels
    nx, ny, nz = ct.geometry.dims
    ysl, xsl = slice(box.y0, box.y1 + 1), slice(box.x0, box.x1 + 1)

    stack = np.stack(
        [
            resize_bilinear(normalized[z, ysl, xsl], pre_cfg.target_rows, pre_cfg.target_cols)
            for z in box.z_range
        ]
    )[:, None].astype(np.float32)

    outputs = []
    for params in models:
        chunks = [
            forward_batch(params, stack[i : i + _SLICE_CHUNK])
            for i in range(0, stack.shape[0], _SLICE_CHUNK)
        ]
        fg = np.concatenate(chunks, axis=0)
        volume = np.zeros((nz, ny, nx), dtype=np.float32)
        for k, z in enumerate(box.z_range):
            prov = SliceProvenance("ct", z, box, (ny, nx))
            volume[z] = unresize_to_original(fg[k], prov, "probability")
        outputs.append(ProbMap(ct.geometry, volume))
    return outputs


def infer_lung(
    ct: Volume,
    params: ModelParams,
    pre_cfg: PreprocessConfig | None = None,
    tau_lung: float = 0.5,
) -> tuple[ProbMap, BinaryMask, BoundingBox]:
    """Two-pass lung segmentation with a single model.

    Pass 1 finds the lung bounding box from uncropped slices; pass 2 re-runs
    the model on the cropped window. Returns (probability map, mask, box).
    """
    if pre_cfg is None:
        pre_cfg = PreprocessConfig()
    (coarse,) = _forward_volume(ct, [params], pre_cfg, box=None)
    coarse_mask = lung_mask_from_prob(coarse, tau_lung)
    if not coarse_mask.voxels.any():
        raise DataError("no lung found: pass-1 lung mask is empty")
    box = bounding_box(coarse_mask, pre_cfg.crop_margin)
    (refined,) = _forward_volume(ct, [params], pre_cfg, box)
    return refined, lung_mask_from_prob(refined, tau_lung), box


def infer_lesions(
    ct: Volume,
    dl_covid: ModelParams,
    dl_norm: ModelParams,
    cfg: LesionConfig | None = None,
    pre_cfg: PreprocessConfig | None = None,
) -> LesionResult:
    """Full lesion pipeline: crop, run both models, subtract, threshold."""
    if cfg is None:
        cfg = LesionConfig()
    if pre_cfg is None:
        pre_cfg = PreprocessConfig()
    if dl_covid.fingerprint != dl_norm.fingerprint:
        raise DataError(
            f"model fingerprint mismatch: {dl_covid.fingerprint!r} vs {dl_norm.fingerprint!r}"
        )

    if cfg.external_lung_mask is not None:
        external = read_volume(Path(cfg.external_lung_mask))
        if not isinstance(external, BinaryMask):
            raise DataError(f"external lung mask is not a binary mask: {cfg.external_lung_mask}")
        require_same_geometry(ct, external, "external lung mask")
        if not external.voxels.any():
            raise DataError("no lung found: external lung mask is empty")
        box = bounding_box(external, pre_cfg.crop_margin)
    else:
        (coarse,) = _forward_volume(ct, [dl_covid], pre_cfg, box=None)
        coarse_mask = lung_mask_from_prob(coarse, cfg.tau_lung)
        if not coarse_mask.voxels.any():
            raise DataError("no lung found: pass-1 lung mask is empty")
        box = bounding_box(coarse_mask, pre_cfg.crop_margin)

    prob_covid, prob_norm = _forward_volume(ct, [dl_covid, dl_norm], pre_cfg, box)
    lesion_prob = subtract_prob_maps(prob_covid, prob_norm)
    lung_mask = lung_mask_from_prob(prob_covid, cfg.tau_lung)
    lesion_mask = threshold_lesion(lesion_prob, cfg, lung_mask)
    return LesionResult(
        lesion_prob=lesion_prob,
        lesion_mask=lesion_mask,
        lung_mask=lung_mask,
        prob_covid=prob_covid,
        prob_norm=prob_norm,
        crop_box=box,
    )
