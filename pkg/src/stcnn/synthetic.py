"""Synthetic 4D data with planted networks.

Each planted network is a set of spherical blobs (its spatial map) driven by
a block-design time course smoothed with a causal exponential kernel. The
volume is the sum of every map times its course plus white Gaussian noise,
restricted to an ellipsoidal brain mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .volume import Volume4D

HRF_TAU = 2.0
DEFAULT_DIMS = (64, 16, 16, 16)


@dataclass
class NetworkSpec:
    blobs: list[tuple[tuple[float, float, float], float]]  # (center, radius)
    onsets: list[int]
    durations: list[int]
    amplitude: float = 1.0


@dataclass
class SyntheticSpec:
    dims: tuple[int, int, int, int] = DEFAULT_DIMS
    networks: list[NetworkSpec] = field(default_factory=list)
    sigma: float = 0.8
    seed: int = 0
    repetition_time: float = 0.72

    def validate(self) -> None:
        if len(self.dims) != 4 or any(int(n) < 1 for n in self.dims):
            raise ValueError(f"degenerate dims {self.dims}")
        t, *spatial = self.dims
        if t < 2:
            raise ValueError(f"need at least 2 frames, got {t}")
        if not self.networks:
            raise ValueError("need at least one planted network")
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be non-negative, got {self.sigma}")
        for g, net in enumerate(self.networks):
            if not net.blobs:
                raise ValueError(f"network {g} has no blobs")
            for center, radius in net.blobs:
                if radius <= 0:
                    raise ValueError(f"network {g}: blob radius must be positive")
                for axis, (c, n) in enumerate(zip(center, spatial)):
                    if not 0 <= c <= n - 1:
                        raise ValueError(f"network {g}: blob center {center} outside axis {axis}")
            if len(net.onsets) != len(net.durations):
                raise ValueError(f"network {g}: onsets and durations differ in length")


def brain_mask(shape) -> np.ndarray:
    """Ellipsoid filling the volume."""
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    r = sum(((g - (n - 1) / 2) / (n / 2)) ** 2 for g, n in zip(grids, shape))
    return r <= 1.0


def blob_map(shape, blobs) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    out = np.zeros(shape, dtype=bool)
    for center, radius in blobs:
        d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
        out |= d2 <= radius ** 2
    return out


def block_course(n_frames: int, onsets, durations, tau: float = HRF_TAU) -> np.ndarray:
    """Boxcar design smoothed causally and z-scored."""
    box = np.zeros(n_frames)
    for on, dur in zip(onsets, durations):
        box[max(on, 0): max(on + dur, 0)] = 1.0
    smooth = lfilter([1.0], [1.0, -np.exp(-1.0 / tau)], box)
    smooth = smooth - smooth.mean()
    sd = smooth.std()
    return smooth / sd if sd > 0 else smooth


def synthesize(spec: SyntheticSpec) -> tuple[Volume4D, list[tuple[np.ndarray, np.ndarray]]]:
    """Render ``spec`` into a volume and its planted ``(map, course)`` pairs."""
    spec.validate()
    t, *spatial = (int(n) for n in spec.dims)
    mask = brain_mask(spatial)
    rng = np.random.default_rng(spec.seed)
    data = np.zeros((t, *spatial))
    truth = []
    for net in spec.networks:
        net_map = blob_map(spatial, net.blobs) & mask
        course = block_course(t, net.onsets, net.durations)
        values = net.amplitude * net_map.astype(np.float64)
        data += course[:, None, None, None] * values[None]
        truth.append((values, course))
    if spec.sigma > 0:
        data += spec.sigma * rng.standard_normal(data.shape)
    data[:, ~mask] = 0.0
    return Volume4D(data, mask=mask, repetition_time=spec.repetition_time), truth


# ---------------------------------------------------------------- cohorts

# canonical blob centers for a 16^3 grid; scaled for other extents
TARGET_CENTERS = [(4.0, 5.0, 8.0), (11.0, 10.0, 8.0)]
DISTRACTOR_CENTERS = [(8.0, 11.0, 4.0), (8.0, 4.0, 11.0)]
BLOB_RADIUS = 2.5
TEMPLATE_RADIUS = 3.0


def _scaled(center, spatial):
    return tuple(c * (n - 1) / 15.0 for c, n in zip(center, spatial))


def template_map(spatial=(16, 16, 16)) -> np.ndarray:
    """Group-level target template: canonical blob positions, slightly enlarged."""
    blobs = [(_scaled(c, spatial), TEMPLATE_RADIUS) for c in TARGET_CENTERS]
    return (blob_map(spatial, blobs) & brain_mask(spatial)).astype(np.float64)


def subject_spec(subject: int, seed: int = 0, dims=DEFAULT_DIMS, sigma: float = 0.8,
                 shift: int = 1, n_distractors: int = 2) -> SyntheticSpec:
    """One subject of a cohort.

    The target network (index 0) follows a shared block design with small
    per-subject onset jitter; distractor networks follow random designs.
    Blob centers are jittered by up to ``shift`` voxels per axis.
    """
    rng = np.random.default_rng([seed, subject])
    t, *spatial = dims

    def jitter(center):
        c = np.array(_scaled(center, spatial)) + rng.integers(-shift, shift + 1, size=3)
        return tuple(float(v) for v in np.clip(c, 0, np.array(spatial) - 1))

    block = max(t // 8, 2)
    onsets = [int(on + rng.integers(-1, 2)) for on in range(block // 2, t, 2 * block)]
    networks = [NetworkSpec([(jitter(c), BLOB_RADIUS) for c in TARGET_CENTERS],
                            onsets, [block] * len(onsets),
                            amplitude=float(rng.uniform(0.8, 1.2)))]
    for g in range(n_distractors):
        center = DISTRACTOR_CENTERS[g % len(DISTRACTOR_CENTERS)]
        dlen = int(rng.integers(max(block // 2, 1), block + block // 2 + 1))
        n_on = max(t // (2 * block), 1)
        d_onsets = sorted(int(v) for v in rng.choice(np.arange(0, max(t - dlen, 1)), n_on, replace=False))
        networks.append(NetworkSpec([(jitter(center), BLOB_RADIUS)], d_onsets, [dlen] * n_on,
                                    amplitude=float(rng.uniform(0.8, 1.2))))
    return SyntheticSpec(dims=tuple(dims), networks=networks, sigma=sigma,
                         seed=int(rng.integers(2 ** 31)))


def make_cohort(n_subjects: int, seed: int = 0, dims=DEFAULT_DIMS, sigma: float = 0.8,
                **kwargs) -> list[SyntheticSpec]:
    return [subject_spec(i, seed, dims, sigma, **kwargs) for i in range(n_subjects)]
