"""Patch pairs, band grouping, label spaces, on-disk format and a synthetic generator.

On-disk layout of a dataset directory::

    manifest.json              UTF-8 JSON (version, counts, shapes, stats, checksums)
    train.bin val.bin test.bin records of <f4 SAR[8,32,32], <f4 MSI[10,32,32], <u2 label
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, CorruptionError, DataError, FormatError, ParameterError

PATCH_SIZE = 32
SAR_BANDS = 8
MSI_BANDS = 10
NUM_LCZ = 17
FORMAT_VERSION = "1.0"
SPLITS = ("train", "val", "test")

SAR_BAND_NAMES = (
    "VH_real",
    "VH_imag",
    "VV_real",
    "VV_imag",
    "VH_lee_intensity",
    "VV_lee_intensity",
    "CMOE_real",
    "CMOE_imag",
)
MSI_BAND_NAMES = ("B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8a", "B11", "B12")

LCZ_NAMES = tuple(str(i) for i in range(1, 11)) + tuple("ABCDEFG")
MERGED_NAMES = (
    "Compact built types",
    "Open built types",
    "Low-rise built types",
    "Heavy industry",
    "Dense vegetation",
    "Low vegetation",
    "Bare surfaces",
    "Water",
)
# index i -> merged group of LCZ class i (1-3, 4-6, 7-9, 10, A-B, C-D, E-F, G)
MERGE_MAP = (0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 4, 4, 5, 5, 6, 6, 7)

RECORD_DTYPE = np.dtype(
    [
        ("sar", "<f4", (SAR_BANDS, PATCH_SIZE, PATCH_SIZE)),
        ("msi", "<f4", (MSI_BANDS, PATCH_SIZE, PATCH_SIZE)),
        ("label", "<u2"),
    ]
)


# ---------------------------------------------------------------- patches


@dataclass(frozen=True)
class PatchPair:
    sar: np.ndarray
    msi: np.ndarray
    label: int

    def __post_init__(self):
        if self.sar.shape != (SAR_BANDS, PATCH_SIZE, PATCH_SIZE):
            raise DataError(f"SAR patch must be {(SAR_BANDS, PATCH_SIZE, PATCH_SIZE)}, got {self.sar.shape}")
        if self.msi.shape != (MSI_BANDS, PATCH_SIZE, PATCH_SIZE):
            raise DataError(f"MSI patch must be {(MSI_BANDS, PATCH_SIZE, PATCH_SIZE)}, got {self.msi.shape}")
        if not 0 <= int(self.label) < NUM_LCZ:
            raise DataError(f"label {self.label} outside 0..{NUM_LCZ - 1}")


class PatchSet(Sequence[PatchPair]):
    """Array-backed sequence of :class:`PatchPair`."""

    def __init__(self, sar: np.ndarray, msi: np.ndarray, labels: np.ndarray):
        sar = np.asarray(sar, dtype=np.float32)
        msi = np.asarray(msi, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if sar.ndim != 4 or sar.shape[1:] != (SAR_BANDS, PATCH_SIZE, PATCH_SIZE):
            raise DataError(f"SAR array must be [N,{SAR_BANDS},{PATCH_SIZE},{PATCH_SIZE}], got {sar.shape}")
        if msi.ndim != 4 or msi.shape[1:] != (MSI_BANDS, PATCH_SIZE, PATCH_SIZE):
            raise DataError(f"MSI array must be [N,{MSI_BANDS},{PATCH_SIZE},{PATCH_SIZE}], got {msi.shape}")
        if not (len(sar) == len(msi) == len(labels)):
            raise DataError("SAR, MSI and label counts differ")
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_LCZ):
            raise DataError(f"labels outside 0..{NUM_LCZ - 1}")
        self.sar, self.msi, self.labels = sar, msi, labels

    @classmethod
    def empty(cls) -> "PatchSet":
        return cls(
            np.zeros((0, SAR_BANDS, PATCH_SIZE, PATCH_SIZE), np.float32),
            np.zeros((0, MSI_BANDS, PATCH_SIZE, PATCH_SIZE), np.float32),
            np.zeros(0, np.int64),
        )

    @classmethod
    def from_pairs(cls, pairs: Sequence[PatchPair]) -> "PatchSet":
        if not pairs:
            return cls.empty()
        return cls(
            np.stack([p.sar for p in pairs]), np.stack([p.msi for p in pairs]), np.array([p.label for p in pairs])
        )

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, slice) or isinstance(i, np.ndarray):
            return PatchSet(self.sar[i], self.msi[i], self.labels[i])
        return PatchPair(self.sar[i], self.msi[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[PatchPair]:
        for i in range(len(self)):
            yield self[i]

    def records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=RECORD_DTYPE)
        rec["sar"] = self.sar
        rec["msi"] = self.msi
        rec["label"] = self.labels
        return rec


@dataclass
class NormStats:
    """Per-band z-score statistics computed on the training split."""

    sar_mean: np.ndarray
    sar_std: np.ndarray
    msi_mean: np.ndarray
    msi_std: np.ndarray

    STD_FLOOR = 1e-6

    @classmethod
    def from_patches(cls, patches: PatchSet) -> "NormStats":
        if len(patches) == 0:
            return cls(np.zeros(SAR_BANDS), np.ones(SAR_BANDS), np.zeros(MSI_BANDS), np.ones(MSI_BANDS))
        sar = patches.sar.astype(np.float64)
        msi = patches.msi.astype(np.float64)
        return cls(
            sar.mean(axis=(0, 2, 3)),
            np.maximum(sar.std(axis=(0, 2, 3)), cls.STD_FLOOR),
            msi.mean(axis=(0, 2, 3)),
            np.maximum(msi.std(axis=(0, 2, 3)), cls.STD_FLOOR),
        )

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(SAR_BANDS), np.ones(SAR_BANDS), np.zeros(MSI_BANDS), np.ones(MSI_BANDS))

    def apply(self, sar: np.ndarray, msi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        def z(x, mean, std):
            return ((x - mean[:, None, None]) / std[:, None, None]).astype(np.float32)

        return z(sar, self.sar_mean, self.sar_std), z(msi, self.msi_mean, self.msi_std)

    def to_json(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("sar_mean", "sar_std", "msi_mean", "msi_std")}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("sar_mean", "sar_std", "msi_mean", "msi_std")))


@dataclass
class DatasetSplits:
    train: PatchSet
    val: PatchSet
    test: PatchSet
    stats: NormStats
    num_classes: int = NUM_LCZ
    label_mode: str = "original17"
    generator: dict | None = None

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def split(self, name: str) -> PatchSet:
        return getattr(self, name)

    def fingerprint(self) -> str:
        """SHA-256 over the three serialised payloads; identical to re-hashing stored files."""
        h = hashlib.sha256()
        for name in SPLITS:
            h.update(hashlib.sha256(self.split(name).records().tobytes()).hexdigest().encode())
        return h.hexdigest()


# ---------------------------------------------------------------- band grouping


@dataclass(frozen=True)
class BandGroupMap:
    sar_groups: dict
    msi_groups: dict

    def __post_init__(self):
        problems = []
        for label, groups, n in (("SAR", self.sar_groups, SAR_BANDS), ("MSI", self.msi_groups, MSI_BANDS)):
            members = [b for idx in groups.values() for b in idx]
            missing = sorted(set(range(n)) - set(members))
            dup = sorted({b for b in members if members.count(b) > 1})
            extra = sorted({b for b in members if not 0 <= b < n})
            if missing:
                problems.append(f"{label} bands missing: {missing}")
            if dup:
                problems.append(f"{label} bands duplicated: {dup}")
            if extra:
                problems.append(f"{label} bands out of range: {extra}")
            if any(len(idx) == 0 for idx in groups.values()):
                problems.append(f"{label} map has an empty group")
        if problems:
            raise ConfigurationError("band map is not a partition: " + "; ".join(problems))

    @classmethod
    def default(cls) -> "BandGroupMap":
        return cls(
            sar_groups={"VH": (0, 1, 4), "VV": (2, 3, 5), "CMOE": (6, 7)},
            msi_groups={"RGB": (0, 1, 2), "VRE": (3, 4, 5, 7), "SWIR": (8, 9), "NIR": (6,)},
        )

    @classmethod
    def identity(cls) -> "BandGroupMap":
        return cls(
            sar_groups={n: (i,) for i, n in enumerate(SAR_BAND_NAMES)},
            msi_groups={n: (i,) for i, n in enumerate(MSI_BAND_NAMES)},
        )

    @property
    def sar_order(self) -> list[int]:
        return [b for idx in self.sar_groups.values() for b in idx]

    @property
    def msi_order(self) -> list[int]:
        return [b for idx in self.msi_groups.values() for b in idx]


@dataclass
class GroupedPair:
    sar: list
    msi: list
    label: int


def split_groups(x: np.ndarray, groups: dict, axis: int = 0) -> list[np.ndarray]:
    return [np.take(x, list(idx), axis=axis) for idx in groups.values()]


def apply_band_grouping(patch: PatchPair, band_map: BandGroupMap) -> GroupedPair:
    return GroupedPair(
        split_groups(patch.sar, band_map.sar_groups), split_groups(patch.msi, band_map.msi_groups), patch.label
    )


def ungroup(grouped: GroupedPair, band_map: BandGroupMap) -> PatchPair:
    """Inverse of :func:`apply_band_grouping`."""

    def restore(parts, order):
        stacked = np.concatenate(parts, axis=0)
        out = np.empty_like(stacked)
        out[order] = stacked
        return out

    return PatchPair(
        restore(grouped.sar, band_map.sar_order), restore(grouped.msi, band_map.msi_order), grouped.label
    )


# ---------------------------------------------------------------- label spaces


@dataclass(frozen=True)
class LabelSpace:
    """``original17`` (identity), ``merged8`` (LCZ albedo groups) or ``original`` with K classes."""

    mode: str = "original17"
    source_classes: int = NUM_LCZ

    def __post_init__(self):
        if self.mode not in ("original17", "merged8", "original"):
            raise ConfigurationError(f"unknown label mode {self.mode!r}")
        if self.mode in ("original17", "merged8") and self.source_classes != NUM_LCZ:
            raise ConfigurationError(f"{self.mode} label space needs 17 source classes")
        if self.source_classes < 1:
            raise ConfigurationError("label space needs at least one class")

    @classmethod
    def original(cls, k: int = NUM_LCZ) -> "LabelSpace":
        return cls("original17", NUM_LCZ) if k == NUM_LCZ else cls("original", k)

    @classmethod
    def merged(cls) -> "LabelSpace":
        return cls("merged8", NUM_LCZ)

    @property
    def merge_map(self) -> np.ndarray:
        if self.mode == "merged8":
            return np.array(MERGE_MAP, dtype=np.int64)
        return np.arange(self.source_classes, dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return 8 if self.mode == "merged8" else self.source_classes

    @property
    def class_names(self) -> tuple[str, ...]:
        if self.mode == "merged8":
            return MERGED_NAMES
        if self.mode == "original17":
            return LCZ_NAMES
        return tuple(str(i) for i in range(self.source_classes))

    @property
    def built_up(self) -> tuple[int, ...]:
        return {"original17": tuple(range(10)), "merged8": (0, 1, 2, 3)}.get(self.mode, ())

    @property
    def natural(self) -> tuple[int, ...]:
        return {"original17": tuple(range(10, 17)), "merged8": (4, 5, 6, 7)}.get(self.mode, ())

    def map(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.source_classes):
            raise DataError(f"labels outside 0..{self.source_classes - 1}")
        return self.merge_map[labels]


def merge_label(label: int, space: LabelSpace) -> int:
    if not 0 <= int(label) < space.source_classes:
        raise DataError(f"label {label} outside 0..{space.source_classes - 1}")
    return int(space.merge_map[int(label)])


# ---------------------------------------------------------------- storage


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def store_dataset(path, splits: DatasetSplits) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for name in SPLITS:
        fname = f"{name}.bin"
        data = splits.split(name).records().tobytes()
        (path / fname).write_bytes(data)
        checksums[fname] = hashlib.sha256(data).hexdigest()
    manifest = {
        "format": "lczlab-dataset",
        "version": FORMAT_VERSION,
        "counts": dict(zip(SPLITS, splits.counts)),
        "shapes": {"sar": [SAR_BANDS, PATCH_SIZE, PATCH_SIZE], "msi": [MSI_BANDS, PATCH_SIZE, PATCH_SIZE]},
        "record_bytes": RECORD_DTYPE.itemsize,
        "bands": {"sar": list(SAR_BAND_NAMES), "msi": list(MSI_BAND_NAMES)},
        "label_mode": splits.label_mode,
        "num_classes": splits.num_classes,
        "normalization": splits.stats.to_json(),
        "checksums": checksums,
    }
    if splits.generator is not None:
        manifest["generator"] = splits.generator
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"no manifest.json in {path}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from exc
    for key in ("version", "counts", "checksums"):
        if key not in manifest:
            raise FormatError(f"{mpath}: missing key {key!r}")
    return manifest


def load_dataset(path, verify: bool = True, mmap: bool = False) -> DatasetSplits:
    """Read a dataset directory; payload sizes are always checked, checksums when ``verify``."""
    path = Path(path)
    manifest = read_manifest(path)
    parts = []
    for name in SPLITS:
        fname = f"{name}.bin"
        fpath = path / fname
        count = int(manifest["counts"][name])
        if not fpath.is_file():
            raise FormatError(f"{fpath}: payload file missing")
        size = os.path.getsize(fpath)
        expected = count * RECORD_DTYPE.itemsize
        if size != expected:
            have = size / RECORD_DTYPE.itemsize
            raise FormatError(f"{fpath}: manifest declares {count} records but payload holds {have:g}")
        if verify and _sha256_file(fpath) != manifest["checksums"].get(fname):
            raise CorruptionError(f"{fpath}: SHA-256 checksum mismatch")
        if count == 0:
            parts.append(PatchSet.empty())
            continue
        if mmap:
            rec = np.memmap(fpath, dtype=RECORD_DTYPE, mode="r", shape=(count,))
        else:
            rec = np.fromfile(fpath, dtype=RECORD_DTYPE, count=count)
        parts.append(_LazyPatchSet(rec) if mmap else PatchSet(rec["sar"], rec["msi"], rec["label"]))
    stats = NormStats.from_json(manifest["normalization"]) if "normalization" in manifest else NormStats.identity()
    return DatasetSplits(
        *parts,
        stats=stats,
        num_classes=int(manifest.get("num_classes", NUM_LCZ)),
        label_mode=manifest.get("label_mode", "original17"),
        generator=manifest.get("generator"),
    )


class _LazyPatchSet(PatchSet):
    """Memory-mapped records; arrays are materialised per access."""

    def __init__(self, rec):
        self._rec = rec

    @property
    def sar(self):
        return self._rec["sar"]

    @property
    def msi(self):
        return self._rec["msi"]

    @property
    def labels(self):
        return self._rec["label"]

    def __len__(self):
        return len(self._rec)

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray)):
            r = self._rec[i]
            return PatchSet(r["sar"], r["msi"], r["label"])
        r = self._rec[i]
        return PatchPair(np.asarray(r["sar"]), np.asarray(r["msi"]), int(r["label"]))


# ---------------------------------------------------------------- synthetic data


def _stratified_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    return n - n_val - n_test, n_val, n_test


@dataclass
class _Templates:
    profile: np.ndarray  # [codes, bands]
    texture: np.ndarray  # [codes, bands, 32, 32]


def _make_templates(rng: np.random.Generator, codes: int, bands: int) -> _Templates:
    yy, xx = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE] / PATCH_SIZE
    profile = rng.normal(0.0, 1.0, size=(codes, bands))
    texture = np.empty((codes, bands, PATCH_SIZE, PATCH_SIZE))
    for c in range(codes):
        # distinct spatial frequency per code; phase and amplitude vary per band
        fx, fy = 1 + c % 4, 1 + (c // 4) % 4 + (c // 16)
        for b in range(bands):
            amp = rng.uniform(0.5, 1.0)
            phase = rng.uniform(0.0, 2 * math.pi)
            texture[c, b] = amp * np.sin(2 * math.pi * (fx * xx + fy * yy) + phase)
    return _Templates(profile, texture)


def generate_synthetic(
    num_classes: int = NUM_LCZ,
    per_class: int = 20,
    seed: int = 0,
    noise: float = 1.0,
    modality_split: str = "shared",
    informative: str = "both",
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> DatasetSplits:
    """Deterministic SAR-MSI patches with class-specific templates plus Gaussian noise.

    Class ``k`` is factored into a SAR code ``k % m`` and an MSI code ``k // m``
    (``m = ceil(sqrt(K))``), so each modality alone resolves only part of the
    label.  In ``shared`` mode both modalities additionally carry a weaker
    component keyed on the full class.  ``informative`` removes the class
    signal from one modality ("sar" keeps only SAR, "msi" only MSI).
    """
    if not 1 <= num_classes <= NUM_LCZ:
        raise ParameterError(f"num_classes must lie in 1..{NUM_LCZ}, got {num_classes}")
    if per_class < 1:
        raise ParameterError(f"per-class count must be >= 1, got {per_class}")
    if noise < 0:
        raise ParameterError(f"noise level must be >= 0, got {noise}")
    if modality_split not in ("shared", "complementary"):
        raise ParameterError(f"unknown modality_split {modality_split!r}")
    if informative not in ("both", "sar", "msi"):
        raise ParameterError(f"unknown informative setting {informative!r}")
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")

    m = max(1, math.ceil(math.sqrt(num_classes)))
    template_rng = np.random.default_rng([seed, 0])
    sar_codes = _make_templates(template_rng, m, SAR_BANDS)
    msi_codes = _make_templates(template_rng, math.ceil(num_classes / m), MSI_BANDS)
    sar_full = _make_templates(template_rng, num_classes, SAR_BANDS)
    msi_full = _make_templates(template_rng, num_classes, MSI_BANDS)
    shared_weight = 0.5 if modality_split == "shared" else 0.0

    def template(k: int, codes: _Templates, full: _Templates, code: int) -> np.ndarray:
        t = codes.profile[code][:, None, None] + codes.texture[code]
        if shared_weight:
            t = t + shared_weight * (full.profile[k][:, None, None] + full.texture[k])
        return t

    noise_rng = np.random.default_rng([seed, 1])
    split_rng = np.random.default_rng([seed, 2])
    buckets = {name: ([], [], []) for name in SPLITS}
    sizes = _stratified_sizes(per_class, fractions)
    for k in range(num_classes):
        sar_k = template(k if informative != "msi" else 0, sar_codes, sar_full, (k if informative != "msi" else 0) % m)
        msi_k = template(k if informative != "sar" else 0, msi_codes, msi_full, (k if informative != "sar" else 0) // m)
        sar = sar_k[None] + noise * noise_rng.normal(size=(per_class,) + sar_k.shape)
        msi = msi_k[None] + noise * noise_rng.normal(size=(per_class,) + msi_k.shape)
        msi = 0.2 + 0.05 * msi  # reflectance-like scale
        lo = 0
        for name, size in zip(SPLITS, sizes):
            buckets[name][0].append(sar[lo : lo + size])
            buckets[name][1].append(msi[lo : lo + size])
            buckets[name][2].append(np.full(size, k))
            lo += size

    parts = []
    for name in SPLITS:
        sar = np.concatenate(buckets[name][0]).astype(np.float32)
        msi = np.concatenate(buckets[name][1]).astype(np.float32)
        labels = np.concatenate(buckets[name][2]).astype(np.int64)
        order = split_rng.permutation(len(labels))
        parts.append(PatchSet(sar[order], msi[order], labels[order]))

    return DatasetSplits(
        *parts,
        stats=NormStats.from_patches(parts[0]),
        num_classes=num_classes,
        label_mode="original17" if num_classes == NUM_LCZ else "original",
        generator={
            "num_classes": num_classes,
            "per_class": per_class,
            "seed": seed,
            "noise": noise,
            "modality_split": modality_split,
            "informative": informative,
            "fractions": list(fractions),
        },
    )
