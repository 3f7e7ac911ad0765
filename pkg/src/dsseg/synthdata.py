"""Deterministic multi-site phantom cohort.

Anatomy (smooth Gaussian blobs + ellipsoidal lesions) depends only on the
subject seed; appearance (per-modality gain/offset, a low-order polynomial
bias field, additive noise) depends only on the site profile.  The lesion
mask is therefore invariant to the site a subject is rendered under.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

N_MODALITIES = 4
VOLUME_MAGIC = b"DSVOL1"
CLAMP_LO, CLAMP_HI = -1.0, 3.0

# per-modality weights mixing the two anatomy fields into T1w/T2w/PDw/FLAIR analogs
_MODALITY_MIX = np.array([
    [0.9, 0.1],
    [0.2, 0.8],
    [0.5, 0.5],
    [0.35, 0.65],
])


@dataclass
class SiteProfile:
    site_id: int
    gain: np.ndarray        # [4]
    offset: np.ndarray      # [4]
    bias_coeffs: np.ndarray  # [6]: x, y, z, x^2, y^2, z^2 over [-1, 1]^3
    noise_sigma: float
    lesion_contrast: np.ndarray  # [4]


@dataclass
class VolumeSample:
    subject_id: int
    site_id: int
    volume: np.ndarray  # [4, D, H, W] float32
    mask: np.ndarray    # [D, H, W] uint8
    split_tag: Optional[str] = None


def gen_sites(n_sites: int, master_seed: int = 0) -> List[SiteProfile]:
    """Seeded site profiles; ranges chosen to make sites separable."""
    if n_sites < 2:
        raise ValueError(f"need at least 2 sites, got {n_sites}")
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 0x517E]))
    profiles = []
    for sid in range(n_sites):
        profiles.append(SiteProfile(
            site_id=sid,
            gain=rng.uniform(0.6, 1.4, N_MODALITIES),
            offset=rng.uniform(-0.2, 0.2, N_MODALITIES),
            bias_coeffs=rng.uniform(-0.15, 0.15, 6),
            noise_sigma=float(rng.uniform(0.01, 0.08)),
            lesion_contrast=rng.uniform(0.35, 0.9, N_MODALITIES),
        ))
    return profiles


def _smooth_blobs(rng, shape, n_blobs, amp):
    d, h, w = shape
    zz, yy, xx = np.meshgrid(np.linspace(-1, 1, d), np.linspace(-1, 1, h),
                             np.linspace(-1, 1, w), indexing="ij")
    field = np.zeros(shape)
    for _ in range(n_blobs):
        cz, cy, cx = rng.uniform(-0.8, 0.8, 3)
        sigma = rng.uniform(0.15, 0.5)
        a = rng.uniform(0.3, 1.0) * amp
        field += a * np.exp(-((zz - cz) ** 2 + (yy - cy) ** 2
                              + (xx - cx) ** 2) / (2 * sigma ** 2))
    return field


def _bias_field(coeffs, shape):
    d, h, w = shape
    zz, yy, xx = np.meshgrid(np.linspace(-1, 1, d), np.linspace(-1, 1, h),
                             np.linspace(-1, 1, w), indexing="ij")
    cx, cy, cz, cx2, cy2, cz2 = coeffs
    return (cx * xx + cy * yy + cz * zz
            + cx2 * xx ** 2 + cy2 * yy ** 2 + cz2 * zz ** 2)


def gen_subject(profile: SiteProfile, subject_seed: int,
                shape: Tuple[int, int, int] = (64, 64, 64),
                subject_id: int = 0) -> VolumeSample:
    """One subject rendered under one site's appearance model."""
    if min(shape) < 16:
        raise ValueError(f"volume shape {shape} too small; extents must be >= 16")
    rng = np.random.default_rng(subject_seed)

    base_a = _smooth_blobs(rng, shape, n_blobs=10, amp=0.8)
    base_b = _smooth_blobs(rng, shape, n_blobs=8, amp=0.8)

    mask = np.zeros(shape, dtype=np.uint8)
    n_lesions = int(rng.integers(1, 9))
    zz, yy, xx = np.indices(shape)
    for _ in range(n_lesions):
        margin = 6
        cz = rng.uniform(margin, shape[0] - margin)
        cy = rng.uniform(margin, shape[1] - margin)
        cx = rng.uniform(margin, shape[2] - margin)
        az, ay, ax = rng.uniform(1.5, 5.0, 3)
        inside = (((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2
                  + ((xx - cx) / ax) ** 2) <= 1.0
        mask[inside] = 1

    volume = np.empty((N_MODALITIES,) + shape, dtype=np.float64)
    bias = _bias_field(profile.bias_coeffs, shape)
    noise_rng = np.random.default_rng(np.random.SeedSequence(
        [subject_seed, profile.site_id, 0xA01]))
    for m in range(N_MODALITIES):
        anat = _MODALITY_MIX[m, 0] * base_a + _MODALITY_MIX[m, 1] * base_b
        anat = anat + profile.lesion_contrast[m] * mask
        v = profile.gain[m] * anat + profile.offset[m] + bias
        if profile.noise_sigma > 0:
            v = v + noise_rng.normal(0.0, profile.noise_sigma, shape)
        volume[m] = v
    volume = np.clip(volume, CLAMP_LO, CLAMP_HI).astype(np.float32)
    return VolumeSample(subject_id=subject_id, site_id=profile.site_id,
                        volume=volume, mask=mask)


def subject_seed(master_seed: int, site_id: int, subject_idx: int) -> int:
    ss = np.random.SeedSequence([master_seed, site_id, subject_idx])
    return int(ss.generate_state(1)[0])


def gen_cohort(n_sites: int, subjects_per_site: int, master_seed: int = 0,
               shape: Tuple[int, int, int] = (64, 64, 64)) -> List[VolumeSample]:
    """n_sites x subjects_per_site cohort with derived per-subject seeds."""
    profiles = gen_sites(n_sites, master_seed)
    samples = []
    sid = 0
    for prof in profiles:
        for k in range(subjects_per_site):
            seed = subject_seed(master_seed, prof.site_id, k)
            samples.append(gen_subject(prof, seed, shape, subject_id=sid))
            sid += 1
    return samples


# -- binary store + manifest ------------------------------------------


class Dataset:
    """Handle over a written cohort; volumes load lazily by file offset."""

    def __init__(self, store_path, entries, shape, n_channels):
        self.store_path = store_path
        self.entries = entries  # list of (subject_id, site_id, seed, offset)
        self.shape = shape
        self.n_channels = n_channels

    def __len__(self):
        return len(self.entries)

    @property
    def site_ids(self):
        return [e[1] for e in self.entries]

    @property
    def subject_ids(self):
        return [e[0] for e in self.entries]

    def load(self, subject_id: int) -> VolumeSample:
        entry = next(e for e in self.entries if e[0] == subject_id)
        _, site_id, _, offset = entry
        d, h, w = self.shape
        nvox = d * h * w
        with open(self.store_path, "rb") as f:
            f.seek(offset)
            sid, site = struct.unpack("<II", f.read(8))
            vol = np.frombuffer(f.read(4 * self.n_channels * nvox),
                                dtype="<f4").reshape(self.n_channels, d, h, w)
            mask = np.frombuffer(f.read(nvox), dtype=np.uint8).reshape(d, h, w)
        return VolumeSample(subject_id=sid, site_id=site,
                            volume=vol.copy(), mask=mask.copy())

    def load_all(self):
        return [self.load(sid) for sid in self.subject_ids]


def _paths(base):
    base = str(base)
    return base + ".dsvol", base + ".tsv"


def write_manifest(samples: List[VolumeSample], base_path,
                   seeds: Optional[List[int]] = None) -> Dataset:
    """Write the binary volume store `<base>.dsvol` and the tab-separated
    manifest `<base>.tsv`; returns the dataset handle."""
    if not samples:
        raise ValueError("no samples to write")
    shape = samples[0].volume.shape[1:]
    nch = samples[0].volume.shape[0]
    for s in samples:
        if s.volume.shape != (nch,) + shape:
            raise ValueError(
                f"inconsistent shapes: {s.volume.shape} vs {(nch,) + shape}")
    if seeds is None:
        seeds = [0] * len(samples)
    store, manifest = _paths(base_path)
    entries = []
    with open(store, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<IIIII", len(samples), *shape, nch))
        for s, seed in zip(samples, seeds):
            offset = f.tell()
            f.write(struct.pack("<II", s.subject_id, s.site_id))
            f.write(np.ascontiguousarray(s.volume, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
            entries.append((s.subject_id, s.site_id, seed, offset))
    with open(manifest, "w") as f:
        for sid, site, seed, offset in entries:
            f.write(f"{sid}\t{site}\t{seed}\t{offset}\n")
    return Dataset(store, entries, shape, nch)


def read_manifest(base_path) -> Dataset:
    store, manifest = _paths(base_path)
    with open(store, "rb") as f:
        magic = f.read(len(VOLUME_MAGIC))
        if magic != VOLUME_MAGIC:
            raise ValueError(f"bad magic {magic!r} at byte 0 of {store}")
        n, d, h, w, nch = struct.unpack("<IIIII", f.read(20))
        f.seek(0, 2)
        actual = f.tell()
    header = len(VOLUME_MAGIC) + 20
    per_sample = 8 + 4 * nch * d * h * w + d * h * w
    expected = header + n * per_sample
    if actual != expected:
        raise ValueError(
            f"truncated store {store}: expected {expected} bytes, "
            f"got {actual}")
    entries = []
    with open(manifest) as f:
        for line in f:
            sid, site, seed, offset = line.rstrip("\n").split("\t")
            entries.append((int(sid), int(site), int(seed), int(offset)))
    if len(entries) != n:
        raise ValueError(
            f"manifest {manifest} lists {len(entries)} entries, "
            f"store header says {n}")
    return Dataset(store, entries, (d, h, w), nch)
