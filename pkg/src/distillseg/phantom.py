"""Synthetic fish-phantom volumes, dataset splits, slice batching, and the
on-disk formats for volumes, masks, and pseudo-label sets.

A phantom is a bright elliptical body on a dark background with K-1
ellipsoidal organs placed along the depth axis in a fixed order. Organ
intensities are drawn from overlapping ranges and centers/radii are
seed-jittered, so slices are not separable by thresholding alone. All
randomness comes from counter-based Philox streams: the same (seed,
parameters) regenerate a volume bitwise.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

Array = np.ndarray

MAGIC_VOLUME = b"PHVL"
MAGIC_MASK = b"PHMK"
PLS_SEPARATOR = b"\n---\n"
_HEADER = struct.Struct("<4sBBHIII")  # magic, version, dtype, reserved, D, H, W
_DTYPE_F32 = 0
_DTYPE_U8 = 1

# background / body / organ intensity design: organ ranges overlap each other
# (class identity is not a threshold) but all sit above the body band, so
# organ-vs-body boundaries survive the noise.
BACKGROUND_LEVEL = np.float32(0.04)
_BODY_RANGE = (0.28, 0.40)
_ORGAN_BASE_LO, _ORGAN_BASE_HI = 0.62, 0.84
_ORGAN_JITTER = 0.07
_MIN_SLOT_WIDTH = 2.6  # voxels of depth per organ slot below which organs cannot fit


@dataclass
class Volume:
    """Float32 intensities in [0,1], shape [D,H,W]."""

    data: Array
    seed: int | None = None
    provenance: dict | None = None

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class MaskVolume:
    """Per-voxel labels in [0,K); 0 = background, 1..K-1 = organs."""

    labels: Array
    num_classes: int


@dataclass
class DatasetSplit:
    """Disjoint volume-id lists; together they cover every volume exactly once."""

    labeled: list[int]
    unlabeled: list[int]
    validation: list[int]
    calibration: list[int]

    def all_ids(self) -> list[int]:
        return sorted(self.labeled + self.unlabeled + self.validation + self.calibration)


def _ellipsoid(zz, yy, xx, center, radii) -> Array:
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_phantom(
    seed: int,
    num_classes: int = 4,
    extents: tuple[int, int, int] = (16, 64, 64),
    noise_sigma: float = 0.05,
) -> tuple[Volume, MaskVolume]:
    """Build one (Volume, MaskVolume) pair deterministically from a seed.

    The mask labels the noise-free geometry; intensity noise never moves
    labels. Raises when the depth extent cannot host num_classes-1 organs.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    d, h, w = extents
    if min(extents) < 8:
        raise ValueError(f"extents must each be >= 8, got {list(extents)}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    n_organs = num_classes - 1

    rng = np.random.Generator(np.random.Philox(seed))
    zz, yy, xx = np.ogrid[0:d, 0:h, 0:w]
    zz, yy, xx = zz.astype(np.float64), yy.astype(np.float64), xx.astype(np.float64)

    body_center = (
        d / 2.0 + rng.uniform(-1.0, 1.0),
        h / 2.0 + rng.uniform(-h / 16, h / 16),
        w / 2.0 + rng.uniform(-w / 16, w / 16),
    )
    body_radii = (
        0.44 * d * rng.uniform(0.92, 1.08),
        0.40 * h * rng.uniform(0.92, 1.08),
        0.44 * w * rng.uniform(0.92, 1.08),
    )
    body_intensity = np.float32(rng.uniform(*_BODY_RANGE))

    usable_depth = 2 * body_radii[0] * 0.9
    slot_width = usable_depth / n_organs
    if slot_width < _MIN_SLOT_WIDTH:
        raise ValueError(
            f"cannot fit {n_organs} organs along depth extent {d}: "
            f"slot width {slot_width:.2f} < {_MIN_SLOT_WIDTH}"
        )

    volume = np.full((d, h, w), BACKGROUND_LEVEL, dtype=np.float32)
    body = _ellipsoid(zz, yy, xx, body_center, body_radii)
    volume[body] = body_intensity
    labels = np.zeros((d, h, w), dtype=np.uint8)

    organs = []
    z0 = body_center[0] - body_radii[0] * 0.9
    for j in range(1, num_classes):
        slot_center = z0 + (j - 0.5) * slot_width
        cz = slot_center + rng.uniform(-0.12, 0.12) * slot_width
        rz = slot_width * rng.uniform(0.34, 0.46)
        rz = min(rz, 0.48 * slot_width)  # keeps depth slots disjoint
        # organ identity cues survive horizontal flips and per-slice
        # standardization: vertical offset and eccentricity vary by class,
        # horizontal position does not
        if n_organs > 1:
            v_off = 0.38 - 0.76 * (j - 1) / (n_organs - 1)
            ecc = (j - 1) / (n_organs - 1)  # 0 = wide, 1 = tall
        else:
            v_off, ecc = 0.0, 0.5
        cy = body_center[1] + v_off * body_radii[1] + rng.uniform(-0.04, 0.04) * h
        cx = body_center[2] + rng.uniform(-0.05, 0.05) * w
        ry = body_radii[1] * (0.26 + 0.14 * ecc) * rng.uniform(0.9, 1.1)
        rx = body_radii[2] * (0.40 - 0.14 * ecc) * rng.uniform(0.9, 1.1)
        # shrink until the organ stays inside the body cross-section
        ry = min(ry, max(2.0, 0.92 * body_radii[1] - abs(cy - body_center[1])))
        rx = min(rx, max(2.0, 0.92 * body_radii[2] - abs(cx - body_center[2])))
        if n_organs > 1:
            base = _ORGAN_BASE_LO + (_ORGAN_BASE_HI - _ORGAN_BASE_LO) * (j - 1) / (n_organs - 1)
        else:
            base = 0.5 * (_ORGAN_BASE_LO + _ORGAN_BASE_HI)
        intensity = np.float32(base + rng.uniform(-_ORGAN_JITTER, _ORGAN_JITTER))
        region = _ellipsoid(zz, yy, xx, (cz, cy, cx), (rz, ry, rx))
        volume[region] = intensity
        labels[region] = j
        organs.append(
            {
                "label": j,
                "center": [cz, cy, cx],
                "radii": [rz, ry, rx],
                "intensity": float(intensity),
            }
        )

    if noise_sigma > 0:
        noise = rng.standard_normal(volume.shape, dtype=np.float32) * np.float32(noise_sigma)
        volume = np.clip(volume + noise, 0.0, 1.0)

    provenance = {
        "seed": seed,
        "num_classes": num_classes,
        "extents": list(extents),
        "noise_sigma": noise_sigma,
        "body": {
            "center": list(body_center),
            "radii": list(body_radii),
            "intensity": float(body_intensity),
        },
        "organs": organs,
    }
    return Volume(volume, seed=seed, provenance=provenance), MaskVolume(labels, num_classes)


def make_split(
    n_volumes: int,
    n_labeled: int,
    seed: int,
    n_validation: int | None = None,
    calib_fraction: float = 0.15,
) -> DatasetSplit:
    """Partition volume ids into labeled/calibration/validation/unlabeled.

    ``n_labeled`` is the ground-truth budget and covers both the teacher's
    labeled set and the quality-classifier calibration subset. Validation
    defaults to a 75:25 ratio against that budget, clamped to what remains;
    validation ids are drawn first so sweeps at one seed share them.
    """
    if n_volumes < 1:
        raise ValueError(f"n_volumes must be >= 1, got {n_volumes}")
    if not 1 <= n_labeled <= n_volumes:
        raise ValueError(f"n_labeled must lie in [1, {n_volumes}], got {n_labeled}")
    n_val = round(n_labeled / 3) if n_validation is None else n_validation
    if n_val < 0:
        raise ValueError(f"n_validation must be >= 0, got {n_validation}")
    n_val = min(n_val, n_volumes - n_labeled)
    n_calib = 0 if n_labeled == 1 else min(max(1, round(calib_fraction * n_labeled)), n_labeled - 1)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5B11])))
    ids = rng.permutation(n_volumes)
    validation = ids[:n_val]
    block = ids[n_val : n_val + n_labeled]
    labeled = block[: n_labeled - n_calib]
    calibration = block[n_labeled - n_calib :]
    unlabeled = ids[n_val + n_labeled :]
    return DatasetSplit(
        labeled=sorted(int(v) for v in labeled),
        unlabeled=sorted(int(v) for v in unlabeled),
        validation=sorted(int(v) for v in validation),
        calibration=sorted(int(v) for v in calibration),
    )


# ---------------------------------------------------------------------------
# slices and batches


@dataclass
class SliceRecord:
    """One training sample: a depth slice with an optional mask."""

    slice_id: str
    image: Array  # [H,W] float32, raw intensities
    mask: Array | None  # [H,W] uint8
    source: str = "labeled"  # "labeled" | "pseudo"


def slice_id(volume_id: int, depth: int) -> str:
    return f"{volume_id:03d}:{depth:02d}"


def collect_slices(
    volumes: dict[int, Volume],
    masks: dict[int, MaskVolume] | None,
    vol_ids: Sequence[int],
    source: str = "labeled",
    skip_empty: bool = False,
) -> list[SliceRecord]:
    records = []
    for vid in vol_ids:
        vol = volumes[vid]
        for depth in range(vol.data.shape[0]):
            mask = masks[vid].labels[depth] if masks is not None else None
            if skip_empty and mask is not None and not mask.any():
                continue
            records.append(SliceRecord(slice_id(vid, depth), vol.data[depth], mask, source))
    return records


def standardize(image: Array) -> Array:
    """Per-slice zero-mean/unit-std with an epsilon guard for flat slices."""
    img = image.astype(np.float32)
    mean = img.mean(dtype=np.float32)
    std = img.std(dtype=np.float32)
    return (img - mean) / (std + np.float32(1e-6))


def slice_batches(
    records: Sequence[SliceRecord],
    crop: int,
    batch: int,
    seed: int,
    augment: bool,
) -> Iterator[tuple[Array, Array | None, list[str]]]:
    """One epoch of batches: each record appears exactly once.

    Yields (images [N,1,c,c], masks [N,c,c] or None, slice ids). Images are
    cropped (randomly under ``augment``, centered otherwise), horizontally
    flipped at random under ``augment``, then standardized per slice.
    """
    if not records:
        return
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    h, w = records[0].image.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds slice extent {h}x{w}")
    has_masks = records[0].mask is not None
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xBA7C])))
    order = rng.permutation(len(records))
    for start in range(0, len(order), batch):
        chunk = order[start : start + batch]
        images = np.empty((len(chunk), 1, crop, crop), dtype=np.float32)
        masks = np.empty((len(chunk), crop, crop), dtype=np.uint8) if has_masks else None
        ids = []
        for i, rec_idx in enumerate(chunk):
            rec = records[rec_idx]
            if augment:
                top = int(rng.integers(0, h - crop + 1))
                left = int(rng.integers(0, w - crop + 1))
                flip = bool(rng.integers(0, 2))
            else:
                top, left, flip = (h - crop) // 2, (w - crop) // 2, False
            img = rec.image[top : top + crop, left : left + crop]
            if flip:
                img = img[:, ::-1]
            images[i, 0] = standardize(img)
            if masks is not None:
                m = rec.mask[top : top + crop, left : left + crop]
                masks[i] = m[:, ::-1] if flip else m
            ids.append(rec.slice_id)
        yield images, masks, ids


# ---------------------------------------------------------------------------
# volume / mask files


def _write_array(path, magic: bytes, dtype_code: int, arr: Array) -> None:
    d, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, 1, dtype_code, 0, d, h, w))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_array(path, magic: bytes, dtype_code: int, np_dtype) -> Array:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header: {len(raw)} bytes < {_HEADER.size}")
    got_magic, version, dtype, _, d, h, w = _HEADER.unpack_from(raw, 0)
    if got_magic != magic:
        raise ValueError(f"{path}: bad magic {got_magic!r} at offset 0, expected {magic!r}")
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version} at offset 4")
    if dtype != dtype_code:
        raise ValueError(f"{path}: dtype code {dtype} at offset 5, expected {dtype_code}")
    expected = d * h * w * np.dtype(np_dtype).itemsize
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload of {len(payload)} bytes at offset {_HEADER.size} "
            f"does not match extents {d}x{h}x{w} ({expected} bytes)"
        )
    return np.frombuffer(payload, dtype=np_dtype).reshape(d, h, w).copy()


def save_volume(vol: Volume, path) -> None:
    _write_array(path, MAGIC_VOLUME, _DTYPE_F32, vol.data.astype("<f4"))


def load_volume(path) -> Volume:
    return Volume(_read_array(path, MAGIC_VOLUME, _DTYPE_F32, "<f4").astype(np.float32))


def save_mask(mask: MaskVolume, path) -> None:
    _write_array(path, MAGIC_MASK, _DTYPE_U8, mask.labels.astype(np.uint8))


def load_mask(path, num_classes: int) -> MaskVolume:
    return MaskVolume(_read_array(path, MAGIC_MASK, _DTYPE_U8, np.uint8), num_classes)


# ---------------------------------------------------------------------------
# pseudo-label sets


@dataclass
class PseudoLabelEntry:
    slice_id: str
    mask: Array  # [H,W] uint8
    quality_score: float | None = None
    accepted: bool | None = None


@dataclass
class PseudoLabelSet:
    entries: list[PseudoLabelEntry] = field(default_factory=list)
    teacher_hash: str = ""
    logits_mode: str = "recompute"  # teacher logits recomputed per batch, never stored
    config_hash: str = ""


def _mask_slice_bytes(mask2d: Array) -> bytes:
    h, w = mask2d.shape
    return _HEADER.pack(MAGIC_MASK, 1, _DTYPE_U8, 0, 1, h, w) + np.ascontiguousarray(
        mask2d.astype(np.uint8)
    ).tobytes()


def save_pseudo_label_set(pls: PseudoLabelSet, path) -> None:
    blobs = []
    entries = []
    offset = 0
    for e in pls.entries:
        raw = _mask_slice_bytes(e.mask)
        entries.append(
            {
                "slice_id": e.slice_id,
                "quality_score": e.quality_score,
                "accepted": e.accepted,
                "offset": offset,
                "length": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "version": 1,
        "teacher_hash": pls.teacher_hash,
        "logits": pls.logits_mode,
        "config_hash": pls.config_hash,
        "entries": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(head + PLS_SEPARATOR + b"".join(blobs))


def load_pseudo_label_set(path) -> PseudoLabelSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(PLS_SEPARATOR)
    if sep < 0:
        raise ValueError(f"{path}: missing manifest separator")
    try:
        manifest = json.loads(raw[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("version") != 1:
        raise ValueError(f"{path}: unsupported version {manifest.get('version')}")
    blob = raw[sep + len(PLS_SEPARATOR) :]
    entries = []
    expected = 0
    for item in manifest["entries"]:
        off, length = int(item["offset"]), int(item["length"])
        if off != expected:
            raise ValueError(f"{path}: slice '{item['slice_id']}' at offset {off}, expected {expected}")
        expected += length
        if expected > len(blob):
            raise ValueError(
                f"{path}: truncated blob: need {expected} bytes for '{item['slice_id']}', "
                f"have {len(blob)}"
            )
        sub = blob[off : off + length]
        magic, version, dtype, _, d, h, w = _HEADER.unpack_from(sub, 0)
        if magic != MAGIC_MASK or version != 1 or dtype != _DTYPE_U8 or d != 1:
            raise ValueError(f"{path}: malformed mask slice at blob offset {off}")
        if length != _HEADER.size + h * w:
            raise ValueError(f"{path}: slice '{item['slice_id']}' length {length} != {_HEADER.size + h * w}")
        mask = np.frombuffer(sub, dtype=np.uint8, offset=_HEADER.size).reshape(h, w).copy()
        entries.append(
            PseudoLabelEntry(
                slice_id=item["slice_id"],
                mask=mask,
                quality_score=item["quality_score"],
                accepted=item["accepted"],
            )
        )
    if expected != len(blob):
        raise ValueError(f"{path}: blob has {len(blob)} bytes, manifest accounts for {expected}")
    return PseudoLabelSet(
        entries=entries,
        teacher_hash=manifest["teacher_hash"],
        logits_mode=manifest.get("logits", "recompute"),
        config_hash=manifest.get("config_hash", ""),
    )
