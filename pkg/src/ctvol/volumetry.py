"""Mask volumes, infection percentage and triage."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .volume_io import Volume3D

DEFAULT_THRESHOLDS = (25.0, 50.0)
SEVERITIES = ("mild", "moderate", "severe")


class VolumetryError(ValueError):
    pass


class NonBinaryMask(VolumetryError):
    pass


class ZeroLungVolume(VolumetryError):
    pass


class BadThresholds(VolumetryError):
    pass


class ShapeMismatch(VolumetryError):
    pass


class InconsistentMasksWarning(UserWarning):
    """The infection volume exceeds the lung volume."""


@dataclass
class VolumetryReport:
    patient_id: str
    lung_volume_mm3: float
    infection_volume_mm3: float
    infection_percent: float
    severity: str
    thresholds_used: tuple
    slice_count: int
    infection_outside_lung_fraction: float = 0.0

    def validate(self) -> None:
        if self.lung_volume_mm3 < 0 or self.infection_volume_mm3 < 0:
            raise VolumetryError("volumes must be non-negative")
        if not 0.0 <= self.infection_percent <= 100.0:
            raise VolumetryError("infection_percent outside [0, 100]")
        if self.lung_volume_mm3 > 0:
            expected = min(100.0 * self.infection_volume_mm3 / self.lung_volume_mm3, 100.0)
            if not math.isclose(self.infection_percent, expected, rel_tol=1e-12, abs_tol=1e-12):
                raise VolumetryError("infection_percent inconsistent with the volumes")
        if self.severity != triage(self.infection_percent, self.thresholds_used):
            raise VolumetryError("severity inconsistent with thresholds")

    def to_dict(self) -> dict:
        self.validate()
        d = asdict(self)
        d["thresholds_used"] = list(self.thresholds_used)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def mask_volume(mask, spacing=None) -> float:
    """Set-voxel count times the voxel volume in mm^3.

    ``mask`` may be a binary :class:`Volume3D` (its spacing is used unless
    ``spacing`` is given) or a plain array together with ``spacing``.
    """
    if isinstance(mask, Volume3D):
        spacing = mask.spacing if spacing is None else spacing
        mask = mask.voxels
    if spacing is None:
        raise VolumetryError("spacing is required for array masks")
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise NonBinaryMask("mask holds values other than 0 and 1")
    dx, dy, dz = (float(s) for s in spacing)
    if not (dx > 0 and dy > 0 and dz > 0):
        raise VolumetryError(f"spacing must be positive, got {spacing}")
    return int(np.count_nonzero(mask)) * (dx * dy * dz)


def infection_percentage(infection_vol: float, lung_vol: float) -> float:
    """100 * infection / lung, clamped to [0, 100].

    Clamping only happens for inconsistent inputs (infection larger than the
    lung) and emits :class:`InconsistentMasksWarning`.
    """
    if lung_vol <= 0:
        raise ZeroLungVolume("lung volume is zero; the infection ratio is undefined")
    if infection_vol < 0:
        raise VolumetryError("infection volume must be non-negative")
    pct = 100.0 * infection_vol / lung_vol
    if pct > 100.0:
        warnings.warn(f"infection volume exceeds lung volume ({pct:.2f}%), clamped to 100%",
                      InconsistentMasksWarning, stacklevel=2)
        pct = 100.0
    return pct


def triage(percent: float, thresholds=DEFAULT_THRESHOLDS) -> str:
    t1, t2 = (float(t) for t in thresholds)
    if not 0.0 <= t1 < t2 <= 100.0:
        raise BadThresholds(f"need 0 <= t1 < t2 <= 100, got {thresholds}")
    if percent < t1:
        return "mild"
    if percent < t2:
        return "moderate"
    return "severe"


def build_report(patient_id: str, lung_mask: Volume3D, infection_mask: Volume3D,
                 thresholds=DEFAULT_THRESHOLDS) -> VolumetryReport:
    if lung_mask.shape != infection_mask.shape:
        raise ShapeMismatch(f"lung {lung_mask.shape} vs infection {infection_mask.shape}")
    if not np.allclose(lung_mask.spacing, infection_mask.spacing, rtol=1e-6, atol=0):
        raise ShapeMismatch(f"lung spacing {lung_mask.spacing} vs infection {infection_mask.spacing}")
    spacing = lung_mask.spacing
    lung_vol = mask_volume(lung_mask.voxels, spacing)
    inf_vol = mask_volume(infection_mask.voxels, spacing)
    pct = infection_percentage(inf_vol, lung_vol)
    inf_set = np.asarray(infection_mask.voxels) > 0
    n_inf = int(np.count_nonzero(inf_set))
    outside = int(np.count_nonzero(inf_set & ~(np.asarray(lung_mask.voxels) > 0)))
    report = VolumetryReport(
        patient_id=patient_id,
        lung_volume_mm3=lung_vol,
        infection_volume_mm3=inf_vol,
        infection_percent=pct,
        severity=triage(pct, thresholds),
        thresholds_used=tuple(float(t) for t in thresholds),
        slice_count=lung_mask.shape[2],
        infection_outside_lung_fraction=outside / n_inf if n_inf else 0.0,
    )
    report.validate()
    return report


def prioritization_rows(reports) -> list[tuple[str, float, str]]:
    """(patient_id, percent, severity) sorted by percent, highest first."""
    rows = [(r.patient_id, r.infection_percent, r.severity) for r in reports]
    return sorted(rows, key=lambda r: (-r[1], r[0]))
