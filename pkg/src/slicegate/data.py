"""Synthetic labeled volumes and the sampling pipeline built on them.

Each volume is a CT-like stack of 40 axial 64x64 slices holding five
archetypes: a large central BLOB, two lateralized mid-size PAIR organs, a
small LENS present in only 4-8 consecutive slices, and a thin RIBBON
threading most slices. Every slice additionally receives 1-3 single-slice
DISTRACTORS: texture patches with the LENS intensity that have no support
in adjacent slices and are labeled background. A slice-wise model cannot
tell them from the real LENS; a model that checks neighboring slices can,
which is exactly the failure mode the temporal adapter is meant to fix.

Intensities are synthetic-HU in [-200, 400] so the CT display window
[-125, 275] clips on both sides. The shift domain brightens organs and
raises noise; the modality domain additionally inverts contrast and is
normalized with volume percentiles instead of the fixed window.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from slicegate.errors import DataError, VolumeFormatError

SVOL_MAGIC = b"SVOL"
SVOL_VERSION = 1

CLASS_IDS = {"blob": 1, "pair_l": 2, "pair_r": 3, "lens": 4, "ribbon": 5}
LATERALIZED = frozenset({"pair_l", "pair_r"})
SAMPLING_WEIGHTS = {"blob": 1.0, "pair_l": 1.0, "pair_r": 1.0, "lens": 8.0, "ribbon": 8.0}

DOMAINS = ("train-domain", "shift-domain", "modality-domain")
_DOMAIN_CODES = {name: i for i, name in enumerate(DOMAINS)}

HU_WINDOW = (-125.0, 275.0)
RAW_RANGE = (-200.0, 400.0)


class BadMagicError(VolumeFormatError):
    pass


class VersionMismatchError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


@dataclass(frozen=True)
class GenConfig:
    z: int = 40
    hw: int = 64
    train_volumes: int = 30
    val_volumes: int = 10
    test_volumes: int = 10
    noise_sigma: float = 12.0
    organ_noise_sigma: float = 7.0
    air_mean: float = -180.0
    tissue_mean: float = -30.0
    blob_mean: float = 90.0
    pair_mean: float = 180.0
    lens_mean: float = 250.0
    ribbon_mean: float = 330.0
    # negative shift: organs dim and noise grows, but every class stays
    # inside the CT window (a positive shift would clip the lens class
    # into saturation and erase the structure the adapter exploits)
    shift_organ_delta: float = -30.0
    shift_noise_scale: float = 1.8
    modality_invert_pivot: float = 100.0
    max_placement_tries: int = 40


@dataclass
class LabeledVolume:
    intensities: np.ndarray  # (Z, H, W) float32, synthetic-HU
    labels: np.ndarray       # (Z, H, W) uint8, 0 = background
    domain_tag: str
    volume_id: str
    rng_seed: int
    distractors: tuple = ()  # (z, y, x, radius) records, not serialized

    def __post_init__(self):
        if self.intensities.shape != self.labels.shape:
            raise DataError("intensity/label shape mismatch")
        if not np.isfinite(self.intensities).all():
            raise DataError("non-finite intensities")
        if self.domain_tag not in DOMAINS:
            raise DataError(f"unknown domain tag {self.domain_tag!r}")

    @property
    def z(self):
        return self.intensities.shape[0]


@dataclass
class ContextStack:
    """Five preprocessed slices centered on one z, plus the query target."""

    slices: np.ndarray       # (5, H, W) float32 in [0, 255]
    center_z: int
    slice_indices: tuple[int, ...]
    replicated_count: int
    class_name: str
    target_mask: np.ndarray  # (H, W) float32 binary
    is_negative: bool

    def __post_init__(self):
        if self.slices.shape[0] != 5:
            raise DataError("context stack must hold exactly 5 slices")
        if self.is_negative != (not self.target_mask.any()):
            raise DataError("is_negative inconsistent with target mask")


@dataclass(frozen=True)
class IndexEntry:
    volume_id: str
    z: int
    class_name: str
    is_negative: bool
    sampling_weight: float


@dataclass
class SampleIndex:
    entries: list[IndexEntry]

    def __post_init__(self):
        if not self.entries:
            raise DataError("empty sample index")
        if any(e.sampling_weight <= 0 for e in self.entries):
            raise DataError("sampling weights must be strictly positive")
        self.probabilities = np.array([e.sampling_weight for e in self.entries])
        self.probabilities /= self.probabilities.sum()

    def negative_fraction(self) -> float:
        return sum(e.is_negative for e in self.entries) / len(self.entries)


# --- generation ---------------------------------------------------------------


def generate_volume(seed: int, domain_tag: str, config: GenConfig = GenConfig(),
                    volume_id: str | None = None) -> LabeledVolume:
    """Deterministically build one synthetic labeled volume."""
    if domain_tag not in DOMAINS:
        raise DataError(f"unknown domain tag {domain_tag!r}")
    rng = np.random.default_rng(seed)
    z, hw = config.z, config.hw
    labels = np.zeros((z, hw, hw), dtype=np.uint8)

    shift = domain_tag == "shift-domain"
    organ_delta = config.shift_organ_delta if shift else 0.0
    noise_sigma = config.noise_sigma * (config.shift_noise_scale if shift else 1.0)
    organ_sigma = config.organ_noise_sigma * (config.shift_noise_scale if shift else 1.0)

    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    body = ((yy - hw / 2) / (hw * 0.42)) ** 2 + ((xx - hw / 2) / (hw * 0.45)) ** 2 <= 1.0

    intensities = np.where(body, config.tissue_mean + organ_delta * 0.5, config.air_mean)
    intensities = np.repeat(intensities[None], z, axis=0)
    intensities = intensities + rng.normal(0.0, noise_sigma, size=(z, hw, hw))

    means = {
        "blob": config.blob_mean + organ_delta,
        "pair_l": config.pair_mean + organ_delta,
        "pair_r": config.pair_mean + organ_delta,
        "lens": config.lens_mean + organ_delta,
        "ribbon": config.ribbon_mean + organ_delta,
    }

    _place_organs(rng, labels, config)
    for name, cid in CLASS_IDS.items():
        mask = labels == cid
        intensities[mask] = means[name] + rng.normal(0.0, organ_sigma, size=mask.sum())

    distractors = _place_distractors(rng, intensities, labels, means["lens"], organ_sigma,
                                     config)
    _assert_distractor_guarantee(labels, distractors)

    if domain_tag == "modality-domain":
        intensities = config.modality_invert_pivot - intensities
    intensities = np.clip(intensities, *RAW_RANGE).astype(np.float32)

    return LabeledVolume(intensities=intensities, labels=labels, domain_tag=domain_tag,
                         volume_id=volume_id or f"{domain_tag}-{seed}", rng_seed=seed,
                         distractors=tuple(distractors))


def _ellipsoid(zc, yc, xc, rz, ry, rx, shape):
    z0, z1 = max(0, int(zc - rz)), min(shape[0], int(zc + rz) + 1)
    zz, yy, xx = np.mgrid[z0:z1, 0:shape[1], 0:shape[2]].astype(np.float64)
    inside = ((zz - zc) / rz) ** 2 + ((yy - yc) / ry) ** 2 + ((xx - xc) / rx) ** 2 <= 1.0
    full = np.zeros(shape, dtype=bool)
    full[z0:z1] = inside
    return full


def _try_place(labels, mask):
    if not mask.any() or (labels[mask] != 0).any():
        return False
    return True


def _place_organs(rng, labels, config):
    z, hw = config.z, config.hw
    shape = labels.shape

    def place(name, sampler):
        for _ in range(config.max_placement_tries):
            mask = sampler()
            if _try_place(labels, mask):
                labels[mask] = CLASS_IDS[name]
                return
        raise DataError(f"could not place archetype {name!r} without overlap")

    # BLOB: large central ellipsoid spanning ~60% of slices
    place("blob", lambda: _ellipsoid(
        zc=z * 0.5 + rng.uniform(-2, 2), yc=hw * 0.38 + rng.uniform(-2, 2),
        xc=hw * 0.42 + rng.uniform(-2, 2), rz=z * 0.30 + rng.uniform(-1, 1),
        ry=hw * 0.17 + rng.uniform(-1, 1), rx=hw * 0.17 + rng.uniform(-1, 1),
        shape=shape))

    # PAIR: two lateralized mid-size ellipsoids; left keeps small x,
    # right keeps large x, which is what the flip rule must preserve.
    for name, x_frac in (("pair_l", 0.22), ("pair_r", 0.78)):
        place(name, lambda x_frac=x_frac: _ellipsoid(
            zc=z * 0.5 + rng.uniform(-3, 3), yc=hw * 0.67 + rng.uniform(-2, 2),
            xc=hw * x_frac + rng.uniform(-1.5, 1.5), rz=z * 0.15 + rng.uniform(-1, 1),
            ry=hw * 0.085 + rng.uniform(-0.5, 0.5), rx=hw * 0.075 + rng.uniform(-0.5, 0.5),
            shape=shape))

    # LENS: present in only 4-8 consecutive slices
    def lens_mask():
        # wide placement range: no positional prior separates the lens
        # from the distractors that mimic it
        extent = int(rng.integers(4, 9))
        margin = max(3, z // 8)
        z0 = int(rng.integers(margin, z - margin - extent))
        zc, rz = z0 + (extent - 1) / 2.0, extent / 2.0
        mask = _ellipsoid(zc=zc, yc=hw * rng.uniform(0.14, 0.52),
                          xc=hw * rng.uniform(0.20, 0.80), rz=rz,
                          ry=4.5 + rng.uniform(0, 1.5), rx=4.5 + rng.uniform(0, 1.5),
                          shape=shape)
        present = np.flatnonzero(mask.any(axis=(1, 2)))
        if not (4 <= len(present) <= 8 and np.all(np.diff(present) == 1)):
            return np.zeros(shape, dtype=bool)  # violates the z-extent contract
        return mask

    place("lens", lens_mask)

    # RIBBON: thin wandering tube <= 3 px wide threading most slices
    def ribbon_mask():
        mask = np.zeros(shape, dtype=bool)
        y = hw * 0.80 + rng.uniform(-2, 2)
        x = hw * 0.50 + rng.uniform(-4, 4)
        yy, xx = np.mgrid[0:hw, 0:hw]
        # 75% of slices: leaves enough absent slices for 1:3 negative sampling
        for zi in range(4, z - 6):
            y += rng.uniform(-0.6, 0.6)
            x += rng.uniform(-0.9, 0.9)
            y = float(np.clip(y, hw * 0.72, hw * 0.86))
            x = float(np.clip(x, hw * 0.30, hw * 0.70))
            mask[zi] |= (yy - y) ** 2 + (xx - x) ** 2 <= 1.4 ** 2
        return mask

    place("ribbon", ribbon_mask)


def _place_distractors(rng, intensities, labels, lens_mean, organ_sigma, config):
    """1-3 single-slice LENS-lookalike patches per slice, placed so the
    same (y, x) region in the slices directly above and below is pure
    background (no organ, no other distractor)."""
    z, hw = config.z, config.hw
    yy, xx = np.mgrid[0:hw, 0:hw]
    occupancy = np.zeros(labels.shape, dtype=bool)  # distractor footprints
    records = []
    organ_any = labels != 0
    for zi in range(z):
        wanted = int(rng.integers(1, 4))
        placed = 0
        for _ in range(200):
            if placed == wanted:
                break
            r = rng.uniform(2.5, 5.5)
            cy = rng.uniform(10, hw - 10)
            cx = rng.uniform(10, hw - 10)
            if ((cy - hw / 2) / (hw * 0.38)) ** 2 + ((cx - hw / 2) / (hw * 0.41)) ** 2 > 1.0:
                continue
            disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
            guard = (yy - cy) ** 2 + (xx - cx) ** 2 <= (r + 2.0) ** 2
            lo, hi = max(0, zi - 1), min(z - 1, zi + 1)
            zone = slice(lo, hi + 1)
            if organ_any[zone][:, guard].any() or occupancy[zone][:, guard].any():
                continue
            intensities[zi][disk] = lens_mean + rng.normal(0, organ_sigma, size=disk.sum())
            occupancy[zi] |= disk
            records.append((zi, float(cy), float(cx), float(r)))
            placed += 1
        if placed == 0:
            raise DataError(f"could not place any distractor on slice {zi}")
    return records


def _assert_distractor_guarantee(labels, records):
    z, hw = labels.shape[0], labels.shape[1]
    yy, xx = np.mgrid[0:hw, 0:labels.shape[2]]
    by_slice = {}
    for zi, cy, cx, r in records:
        by_slice.setdefault(zi, []).append((yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2)
    for zi, cy, cx, r in records:
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
        for nz in (zi - 1, zi + 1):
            if not 0 <= nz < z:
                continue
            if labels[nz][disk].any():
                raise DataError("distractor overlaps an organ in an adjacent slice")
            for other in by_slice.get(nz, ()):
                if (other & disk).any():
                    raise DataError("distractor has distractor support in an adjacent slice")


# --- preprocessing ------------------------------------------------------------


def preprocess_ct(raw: np.ndarray) -> np.ndarray:
    """Clamp to the HU window [-125, 275] and map affinely onto [0, 255]."""
    lo, hi = HU_WINDOW
    clipped = np.clip(np.asarray(raw, dtype=np.float32), lo, hi)
    return (clipped - lo) * (255.0 / (hi - lo))


def preprocess_mr(raw: np.ndarray) -> np.ndarray:
    """Per-volume percentile normalization: [p1, p99] clipped onto [0, 255]."""
    raw = np.asarray(raw, dtype=np.float32)
    p1, p99 = np.percentile(raw, [1.0, 99.0])
    if p1 == p99:
        warnings.warn("degenerate constant volume; percentile window is empty",
                      stacklevel=2)
        return np.zeros_like(raw)
    clipped = np.clip(raw, p1, p99)
    return ((clipped - p1) * (255.0 / (p99 - p1))).astype(np.float32)


def preprocess_volume(volume: LabeledVolume) -> np.ndarray:
    if volume.domain_tag == "modality-domain":
        return preprocess_mr(volume.intensities)
    return preprocess_ct(volume.intensities)


# --- context stacks and augmentation -------------------------------------------


def window_indices(z: int, num_slices: int) -> tuple[tuple[int, ...], int]:
    """Clamped [z-2 .. z+2] window plus how many positions were replicated."""
    wanted = np.arange(z - 2, z + 3)
    clamped = np.clip(wanted, 0, num_slices - 1)
    return tuple(int(i) for i in clamped), int((wanted != clamped).sum())


def extract_context_stack(volume: LabeledVolume, z: int, class_name: str,
                          preprocessed: np.ndarray | None = None) -> ContextStack:
    if not 0 <= z < volume.z:
        raise DataError(f"slice {z} out of range for volume of depth {volume.z}")
    if class_name not in CLASS_IDS:
        raise DataError(f"unknown class {class_name!r}")
    if preprocessed is None:
        preprocessed = preprocess_volume(volume)
    indices, replicated = window_indices(z, volume.z)
    slices = preprocessed[list(indices)].copy()
    target = (volume.labels[z] == CLASS_IDS[class_name]).astype(np.float32)
    return ContextStack(slices=slices, center_z=z, slice_indices=indices,
                        replicated_count=replicated, class_name=class_name,
                        target_mask=target, is_negative=not bool(target.any()))


def augment_stack(stack: ContextStack, rng: np.random.Generator) -> ContextStack:
    """One rotation in [-5, 5] degrees and (for non-lateralized classes) one
    coin-flip horizontal flip, applied identically to all 5 slices and the
    mask. Bilinear resampling for intensities, nearest for the mask."""
    angle = float(rng.uniform(-5.0, 5.0))
    flip = stack.class_name not in LATERALIZED and rng.random() < 0.5
    slices = np.stack([
        ndimage.rotate(s, angle, reshape=False, order=1, mode="nearest")
        for s in stack.slices
    ]).astype(np.float32)
    mask = ndimage.rotate(stack.target_mask, angle, reshape=False, order=0,
                          mode="constant", cval=0.0).astype(np.float32)
    if flip:
        slices = slices[:, :, ::-1].copy()
        mask = mask[:, ::-1].copy()
    slices = np.clip(slices, 0.0, 255.0)
    return ContextStack(slices=slices, center_z=stack.center_z,
                        slice_indices=stack.slice_indices,
                        replicated_count=stack.replicated_count,
                        class_name=stack.class_name, target_mask=mask,
                        is_negative=not bool(mask.any()))


# --- sampling index -------------------------------------------------------------


def build_sample_index(volumes: list[LabeledVolume], seed: int,
                       weights: dict[str, float] = SAMPLING_WEIGHTS) -> SampleIndex:
    """All positive slices per class, plus ceil(positives/3) seeded negatives
    drawn from slices where the class is absent. Entry weight is the class
    sampling weight; negatives inherit their class's weight."""
    rng = np.random.default_rng(seed)
    entries: list[IndexEntry] = []
    for class_name in sorted(CLASS_IDS):
        cid = CLASS_IDS[class_name]
        positives, negative_pool = [], []
        for vol in volumes:
            present = (vol.labels == cid).any(axis=(1, 2))
            for z in np.flatnonzero(present):
                positives.append((vol.volume_id, int(z)))
            for z in np.flatnonzero(~present):
                negative_pool.append((vol.volume_id, int(z)))
        if not positives:
            raise DataError(f"class {class_name!r} has no positive slices in the corpus")
        w = weights[class_name]
        entries.extend(IndexEntry(vid, z, class_name, False, w) for vid, z in positives)
        n_neg = math.ceil(len(positives) / 3)
        # a near-ubiquitous class can exhaust its absent-slice pool; repeat
        # entries in that case so the 1:3 ratio still holds in entry count
        replace = n_neg > len(negative_pool)
        picks = rng.choice(len(negative_pool), size=n_neg, replace=replace)
        entries.extend(IndexEntry(*negative_pool[i], class_name, True, w)
                       for i in sorted(picks))
    return SampleIndex(entries=entries)


class VolumeSet:
    """Volumes keyed by id with cached preprocessed intensities."""

    def __init__(self, volumes: list[LabeledVolume]):
        self.volumes = {v.volume_id: v for v in volumes}
        if len(self.volumes) != len(volumes):
            raise DataError("duplicate volume ids")
        self._pre: dict[str, np.ndarray] = {}

    def __iter__(self):
        return iter(self.volumes.values())

    def __len__(self):
        return len(self.volumes)

    def preprocessed(self, volume_id: str) -> np.ndarray:
        if volume_id not in self._pre:
            self._pre[volume_id] = preprocess_volume(self.volumes[volume_id])
        return self._pre[volume_id]

    def stack(self, entry: IndexEntry) -> ContextStack:
        vol = self.volumes[entry.volume_id]
        return extract_context_stack(vol, entry.z, entry.class_name,
                                     preprocessed=self.preprocessed(entry.volume_id))


def draw_entries(index: SampleIndex, count: int, rng: np.random.Generator) -> np.ndarray:
    """Entry indices drawn with replacement, probability ~ entry weight."""
    if not index.entries:
        raise DataError("empty sample index")
    if count < 1:
        raise DataError("draw count must be >= 1")
    return rng.choice(len(index.entries), size=count, p=index.probabilities)


def sample_batch(index: SampleIndex, volumes: VolumeSet, batch_size: int,
                 rng: np.random.Generator, augment: bool = True) -> list[ContextStack]:
    """Weighted draws turned into (optionally augmented) context stacks."""
    picks = draw_entries(index, batch_size, rng)
    stacks = []
    for i in picks:
        stack = volumes.stack(index.entries[i])
        stacks.append(augment_stack(stack, rng) if augment else stack)
    return stacks


# --- SVOL container --------------------------------------------------------------


def write_volume(path, volume: LabeledVolume) -> None:
    z, h, w = volume.intensities.shape
    header = SVOL_MAGIC + struct.pack(
        "<IIIIIQB", SVOL_VERSION, z, h, w, len(CLASS_IDS),
        volume.rng_seed & 0xFFFFFFFFFFFFFFFF, _DOMAIN_CODES[volume.domain_tag])
    body = volume.intensities.astype("<f4").tobytes() + volume.labels.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def read_volume(path, volume_id: str | None = None) -> LabeledVolume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != SVOL_MAGIC:
        raise BadMagicError(f"{path}: not an SVOL file")
    if len(raw) < 4 + struct.calcsize("<IIIIIQB"):
        raise TruncatedFileError(f"{path}: truncated header")
    version, z, h, w, _ncls, seed, domain_code = struct.unpack_from("<IIIIIQB", raw, 4)
    if version != SVOL_VERSION:
        raise VersionMismatchError(
            f"{path}: SVOL version {version}, reader supports {SVOL_VERSION}")
    offset = 4 + struct.calcsize("<IIIIIQB")
    n = z * h * w
    if len(raw) != offset + 4 * n + n:
        raise TruncatedFileError(f"{path}: expected {offset + 5 * n} bytes, got {len(raw)}")
    intensities = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(z, h, w)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset + 4 * n).reshape(z, h, w)
    try:
        domain = DOMAINS[domain_code]
    except IndexError:
        raise VolumeFormatError(f"{path}: unknown domain code {domain_code}") from None
    return LabeledVolume(intensities=intensities.copy(), labels=labels.copy(),
                         domain_tag=domain,
                         volume_id=volume_id or Path(path).stem, rng_seed=int(seed))


# --- dataset on disk --------------------------------------------------------------


def generate_dataset(out_dir, seed: int, domains: tuple[str, ...] = ("train-domain",),
                     config: GenConfig = GenConfig()) -> dict:
    """30/10/10 volumes for the train domain; 10 test-only volumes for each
    additional domain. Returns the manifest (also written to disk)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if "train-domain" not in domains:
        raise DataError("the train-domain is required")
    records = []
    for domain in domains:
        if domain == "train-domain":
            splits = (("train", config.train_volumes), ("val", config.val_volumes),
                      ("test", config.test_volumes))
        else:
            splits = (("test", config.test_volumes),)
        for split, count in splits:
            for i in range(count):
                vid = f"{domain.split('-')[0]}-{split}-{i:03d}"
                vol_seed = int(np.random.SeedSequence(
                    [seed, _DOMAIN_CODES[domain], _SPLIT_CODES[split], i]).generate_state(1)[0])
                vol = generate_volume(vol_seed, domain, config, volume_id=vid)
                fname = f"{vid}.svol"
                write_volume(out / fname, vol)
                records.append({"volume_id": vid, "file": fname, "split": split,
                                "domain": domain})
    manifest = {
        "seed": seed,
        "class_names": sorted(CLASS_IDS, key=CLASS_IDS.get),
        "gen_config": asdict(config),
        "volumes": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def load_split(manifest_path, split: str, domain: str = "train-domain") -> VolumeSet:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    picked = [r for r in manifest["volumes"]
              if r["split"] == split and r["domain"] == domain]
    if not picked:
        raise DataError(f"no volumes for split={split!r} domain={domain!r} in {manifest_path}")
    return VolumeSet([read_volume(root / r["file"], volume_id=r["volume_id"])
                      for r in picked])
