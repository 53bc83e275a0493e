"""Volumes, intensity normalisation, orthogonal slicing, 2-D feature
extraction, patch sampling and a synthetic multi-modal tumour generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

MODALITIES = ("T1", "T1c", "T2", "FLAIR")
NUM_CLASSES = 4
# axis of the [K, X, Y, Z] image along which each orientation slices
ORIENTATION_AXIS = {"axial": 3, "coronal": 2, "sagittal": 1}
ORIENTATIONS = tuple(ORIENTATION_AXIS)


@dataclass
class VolumeSet:
    patient_id: str
    image: np.ndarray  # [K, X, Y, Z]
    labels: np.ndarray | None = None  # [X, Y, Z], values in {0, 1, 2, 3}
    present: tuple[bool, ...] | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 4:
            raise ValueError(f"{self.patient_id}: image must be [K, X, Y, Z], got {self.image.shape}")
        if self.present is None:
            self.present = (True,) * self.image.shape[0]
        self.present = tuple(bool(p) for p in self.present)
        if len(self.present) != self.image.shape[0]:
            raise ValueError(f"{self.patient_id}: presence mask length {len(self.present)} "
                             f"!= {self.image.shape[0]} modalities")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.image.shape[1:]:
                raise ValueError(f"{self.patient_id}: labels {self.labels.shape} vs image {self.image.shape}")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
                raise ValueError(f"{self.patient_id}: label values outside 0..3")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.image.shape[1:])

    @property
    def num_modalities(self) -> int:
        return self.image.shape[0]

    def without_modality(self, k: int) -> "VolumeSet":
        image = self.image.copy()
        image[k] = 0
        present = list(self.present)
        present[k] = False
        return VolumeSet(self.patient_id, image, self.labels, tuple(present))


@dataclass
class FeatureVolume:
    features: np.ndarray  # [3*C, X, Y, Z] unnormalised logits
    source: str = ""
    order: tuple[str, ...] = ORIENTATIONS

    def __post_init__(self):
        if self.features.ndim != 4 or self.features.shape[0] % 3:
            raise ValueError(f"feature volume must be [3*C, X, Y, Z], got {self.features.shape}")

    @property
    def num_classes(self) -> int:
        return self.features.shape[0] // 3

    def block(self, orientation: str) -> np.ndarray:
        i = self.order.index(orientation)
        c = self.num_classes
        return self.features[i * c:(i + 1) * c]

    def channel_names(self) -> list[str]:
        return [f"{o}:class{c}" for o in self.order for c in range(self.num_classes)]


# ---------------------------------------------------------------------------
# normalisation


def normalize_intensity(volume: VolumeSet, constant: float = 1.0) -> VolumeSet:
    """Divide each present modality by the median of its non-zero voxels, times ``constant``."""
    image = volume.image.astype(np.float32, copy=True)
    for k in range(volume.num_modalities):
        if not volume.present[k]:
            continue
        nz = image[k][image[k] != 0]
        if nz.size == 0:
            raise ValueError(f"patient {volume.patient_id}: modality {k} has no non-zero voxels")
        image[k] = image[k] * np.float32(constant / np.median(nz.astype(np.float64)))
    return VolumeSet(volume.patient_id, image, volume.labels, volume.present)


# ---------------------------------------------------------------------------
# slicing


def to_slices(volume: np.ndarray, orientation: str) -> np.ndarray:
    """[C, X, Y, Z] -> [n_slices, C, a, b] along the orientation's axis."""
    return np.moveaxis(volume, ORIENTATION_AXIS[orientation], 0)


def from_slices(slices: np.ndarray, orientation: str) -> np.ndarray:
    """Inverse of :func:`to_slices`."""
    return np.moveaxis(slices, 0, ORIENTATION_AXIS[orientation])


def label_slices(labels: np.ndarray, orientation: str) -> np.ndarray:
    return to_slices(labels[None], orientation)[:, 0]


def pad_to_multiple(x: np.ndarray, multiple: int, axes: Sequence[int]) -> np.ndarray:
    pads = [(0, 0)] * x.ndim
    for a in axes:
        pads[a] = (0, (-x.shape[a]) % multiple)
    return np.pad(x, pads) if any(p[1] for p in pads) else x


def run_net(forward, x: np.ndarray, multiple: int, chunk: int | None = None) -> np.ndarray:
    """Evaluate ``forward`` on [B, C, *S] padded up to ``multiple`` and cropped back."""
    spatial = x.shape[2:]
    axes = range(2, x.ndim)
    xp = pad_to_multiple(x, multiple, axes)
    chunk = chunk or x.shape[0]
    outs = []
    for i in range(0, x.shape[0], chunk):
        y = forward(ad.tensor(xp[i:i + chunk])).data
        outs.append(y[(slice(None), slice(None)) + tuple(slice(0, n) for n in spatial)])
    return np.concatenate(outs, axis=0)


def orientation_logits(net, image: np.ndarray, orientation: str, multiple: int, chunk: int = 8) -> np.ndarray:
    """Run a 2-D net over every slice of one orientation; returns [C, X, Y, Z] logits."""
    sl = np.ascontiguousarray(to_slices(image, orientation))
    out = run_net(lambda t: net.forward(t, train=False), sl, multiple, chunk)
    return from_slices(out, orientation)


def extract_features(volume: VolumeSet, axial_net, coronal_net, sagittal_net,
                     multiple: int = 1, source: str = "") -> FeatureVolume:
    """Stack the final-layer logits of three orientation-specific 2-D nets (axial, coronal, sagittal)."""
    nets = {"axial": axial_net, "coronal": coronal_net, "sagittal": sagittal_net}
    classes = {n.spec.num_classes for n in nets.values()}
    if len(classes) != 1:
        raise ValueError(f"2-D networks disagree on the class count: {classes}")
    for o, net in nets.items():
        if net.spec.in_channels != volume.num_modalities:
            raise ValueError(f"{o} network expects {net.spec.in_channels} channels, "
                             f"volume has {volume.num_modalities}")
    blocks = [orientation_logits(nets[o], volume.image, o, multiple) for o in ORIENTATIONS]
    feats = np.concatenate(blocks, axis=0).astype(np.float32)
    return FeatureVolume(feats, source=source, order=ORIENTATIONS)


# ---------------------------------------------------------------------------
# patches


@dataclass
class Patch:
    image: np.ndarray
    labels: np.ndarray | None
    origin: tuple[int, ...]
    features: np.ndarray | None = None

    @property
    def data(self) -> np.ndarray:
        if self.features is None:
            return self.image
        return np.concatenate([self.image, self.features], axis=0)


def sample_origins(extents: Sequence[int], patch: Sequence[int], count: int,
                   rng: np.random.Generator, labels: np.ndarray | None = None,
                   balanced: bool = False) -> list[tuple[int, ...]]:
    extents, patch = tuple(extents), tuple(patch)
    if len(patch) != len(extents) or any(p > e for p, e in zip(patch, extents)):
        raise ValueError(f"patch {patch} larger than volume {extents}")
    origins = []
    for _ in range(count):
        if balanced and labels is not None:
            present = np.unique(labels)
            c = rng.choice(present)
            idx = np.argwhere(labels == c)
            centre = idx[rng.integers(len(idx))]
            o = tuple(int(np.clip(ci - p // 2, 0, e - p)) for ci, p, e in zip(centre, patch, extents))
        else:
            o = tuple(int(rng.integers(0, e - p + 1)) for p, e in zip(patch, extents))
        origins.append(o)
    return origins


def crop(volume: VolumeSet, features: FeatureVolume | None, origin, patch) -> Patch:
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return Patch(
        image=volume.image[(slice(None),) + sl],
        labels=None if volume.labels is None else volume.labels[sl],
        origin=tuple(origin),
        features=None if features is None else features.features[(slice(None),) + sl],
    )


def sample_patches(volume: VolumeSet, features: FeatureVolume | None, patch: Sequence[int],
                   count: int, rng_seed: int, balanced: bool = False) -> list[Patch]:
    if features is not None and features.features.shape[1:] != volume.image.shape[1:]:
        raise ValueError(f"features {features.features.shape} not aligned with image {volume.image.shape}")
    rng = np.random.default_rng(rng_seed)
    origins = sample_origins(volume.extents, patch, count, rng, volume.labels, balanced)
    return [crop(volume, features, o, patch) for o in origins]


# ---------------------------------------------------------------------------
# synthetic data

# mean intensity per tissue, columns follow MODALITIES
_TISSUE = {
    "white": (1.00, 1.00, 0.80, 0.90),
    "grey": (0.85, 0.85, 1.00, 1.00),
    "csf": (0.40, 0.40, 1.80, 0.50),
    2: (0.85, 0.90, 1.50, 1.60),  # edema: bright FLAIR/T2
    1: (0.55, 0.60, 1.70, 1.20),  # necrotic / non-enhancing core
    3: (0.90, 1.80, 1.30, 1.30),  # enhancing core: bright T1c
}


def _ellipsoid(grid, centre, radii, rot) -> np.ndarray:
    d = np.stack([g - c for g, c in zip(grid, centre)], axis=-1) @ rot
    return ((d / np.asarray(radii)) ** 2).sum(axis=-1) <= 1.0


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _smooth_field(grid, rng: np.random.Generator, n_waves: int = 4) -> np.ndarray:
    f = np.zeros(grid[0].shape)
    for _ in range(n_waves):
        k = rng.normal(size=3) * 2.5
        f += np.cos(sum(ki * g for ki, g in zip(k, grid)) + rng.uniform(0, 2 * np.pi))
    return f / n_waves


def _synthetic_patient(rng: np.random.Generator, size: int, noise: float, patient_id: str) -> VolumeSet:
    ax = (np.arange(size) + 0.5) / size
    grid = np.meshgrid(ax, ax, ax, indexing="ij")
    brain_c = 0.5 + rng.uniform(-0.03, 0.03, size=3)
    brain = _ellipsoid(grid, brain_c, 0.44 + rng.uniform(-0.03, 0.02, size=3), np.eye(3))

    tissue = np.where(_smooth_field(grid, rng) > 0, 1.0, 0.0)
    mean = np.zeros((4,) + brain.shape)
    for k in range(4):
        mean[k] = tissue * _TISSUE["white"][k] + (1 - tissue) * _TISSUE["grey"][k]

    labels = np.zeros(brain.shape, dtype=np.uint8)
    while True:
        centre = brain_c + rng.uniform(-0.15, 0.15, size=3)
        rot = _rotation(rng)
        wt_r = rng.uniform(0.13, 0.2, size=3)
        core_r = wt_r * rng.uniform(0.5, 0.65, size=3)
        core_c = centre + rng.uniform(-0.3, 0.3, size=3) * (wt_r - core_r)
        enh_r = core_r * rng.uniform(0.5, 0.65, size=3)
        enh_c = core_c + rng.uniform(-0.3, 0.3, size=3) * (core_r - enh_r)
        wt = _ellipsoid(grid, centre, wt_r, rot) & brain
        core = _ellipsoid(grid, core_c, core_r, rot) & wt
        enh = _ellipsoid(grid, enh_c, enh_r, rot) & core
        labels[:] = 0
        labels[wt] = 2
        labels[core] = 1
        labels[enh] = 3
        if all(np.count_nonzero(labels == c) > 0 for c in range(4)):
            break

    # tumour-like healthy structures away from the lesion
    for _ in range(rng.integers(1, 3)):
        c = brain_c + rng.uniform(-0.25, 0.25, size=3)
        blob = _ellipsoid(grid, c, rng.uniform(0.04, 0.08, size=3), _rotation(rng)) & brain & (labels == 0)
        for k in range(4):
            mean[k][blob] = _TISSUE["csf"][k]
    for cls in (2, 1, 3):
        for k in range(4):
            mean[k][labels == cls] = _TISSUE[cls][k]

    image = mean + noise * rng.normal(size=mean.shape)
    image = np.maximum(image, 0.05)
    gains = rng.uniform(50, 500, size=4)
    image = image * gains[:, None, None, None] * brain
    labels[~brain] = 0
    return VolumeSet(patient_id, image.astype(np.float32), labels)


def generate_synthetic(rng_seed: int, size: int = 48, num_patients: int = 10,
                       noise: float = 0.3) -> list[VolumeSet]:
    """Volumes with nested edema > core > enhancing-core ellipsoids and four modalities.

    The FLAIR/T2-like channels light up edema, the T1c-like channel the
    enhancing core; per-modality gains are random so raw ranges differ by
    patient. Identical seeds give identical volumes.
    """
    if size < 32:
        raise ValueError(f"synthetic volumes need size >= 32, got {size}")
    seeds = np.random.SeedSequence(rng_seed).spawn(num_patients)
    return [_synthetic_patient(np.random.default_rng(s), size, noise, f"patient_{i:03d}")
            for i, s in enumerate(seeds)]
