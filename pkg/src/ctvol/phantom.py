"""Synthetic chest CT phantoms with ground-truth lung and infection masks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .volume_io import Volume3D

AIR_HU = -1000.0
BODY_HU = 40.0
LUNG_HU = -850.0
INFECTION_HU = -300.0


@dataclass
class PhantomSpec:
    shape: tuple = (32, 32, 12)
    spacing: tuple = (1.0, 1.0, 2.0)
    # body cross-section: semi-axes along x and y, in voxels
    body_radii: tuple = (15.0, 12.0)
    # two lung ellipsoids: centers and semi-axes (x, y, z) in voxels
    lung_centers: tuple = ((10.0, 15.5, 5.5), (21.0, 15.5, 5.5))
    lung_radii: tuple = ((5.5, 8.0, 6.5), (5.5, 8.0, 6.5))
    # per-patient uniform jitter of every center/radius component, in voxels
    jitter: float = 1.0
    blob_count: int = 3
    blob_radius_mm: tuple = (2.0, 4.5)
    noise_hu: float = 25.0
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.body_radii = tuple(float(r) for r in self.body_radii)
        self.lung_centers = tuple(tuple(float(v) for v in c) for c in self.lung_centers)
        self.lung_radii = tuple(tuple(float(v) for v in r) for r in self.lung_radii)
        self.blob_radius_mm = tuple(float(r) for r in self.blob_radius_mm)
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"bad phantom shape {self.shape}")
        if len(self.lung_centers) != 2 or len(self.lung_radii) != 2:
            raise ValueError("a phantom has exactly two lung ellipsoids")
        if self.blob_count < 0 or not 0 < self.blob_radius_mm[0] <= self.blob_radius_mm[1]:
            raise ValueError("blob_count must be >= 0 and blob radius range positive and ordered")
        if self.noise_hu < 0 or self.jitter < 0:
            raise ValueError("noise_hu and jitter must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


@dataclass
class Phantom:
    patient_id: str
    ct: Volume3D
    lung: Volume3D
    infection: Volume3D
    meta: dict = field(default_factory=dict)


def generate_phantom(spec: PhantomSpec, index: int) -> Phantom:
    """Build patient ``index``; the result depends only on (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    nx, ny, nz = spec.shape
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    body = ((x - cx) / spec.body_radii[0]) ** 2 + ((y - cy) / spec.body_radii[1]) ** 2 <= 1.0

    lung = np.zeros(spec.shape, dtype=bool)
    for center, radii in zip(spec.lung_centers, spec.lung_radii):
        c = np.array(center) + rng.uniform(-spec.jitter, spec.jitter, size=3)
        r = np.maximum(np.array(radii) + rng.uniform(-spec.jitter, spec.jitter, size=3), 1.0)
        lung |= ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0
    lung &= body

    infection = np.zeros(spec.shape, dtype=bool)
    lung_voxels = np.argwhere(lung)
    dx, dy, dz = spec.spacing
    blobs = []
    if len(lung_voxels):
        for _ in range(spec.blob_count):
            center = lung_voxels[rng.integers(len(lung_voxels))]
            radius = rng.uniform(*spec.blob_radius_mm)
            d2 = ((x - center[0]) * dx) ** 2 + ((y - center[1]) * dy) ** 2 + ((z - center[2]) * dz) ** 2
            infection |= d2 <= radius ** 2
            blobs.append({"center": [int(v) for v in center], "radius_mm": float(radius)})
    # blobs are clipped to the lung so every infection voxel lies inside it
    infection &= lung

    hu = np.full(spec.shape, AIR_HU)
    hu[body] = BODY_HU
    hu[lung] = LUNG_HU
    hu[infection] = INFECTION_HU
    if spec.noise_hu > 0:
        hu = hu + rng.normal(0.0, spec.noise_hu, size=spec.shape)

    pid = f"phantom_{index:03d}"
    return Phantom(
        pid,
        Volume3D(hu.astype(np.float32), spec.spacing, "intensity"),
        Volume3D.mask(lung, spec.spacing),
        Volume3D.mask(infection, spec.spacing),
        {"blobs": blobs},
    )


def generate_phantoms(spec: PhantomSpec, n: int) -> list[Phantom]:
    if n < 1:
        raise ValueError("need at least one phantom")
    return [generate_phantom(spec, i) for i in range(n)]
