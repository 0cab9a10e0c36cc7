"""Dataset ingestion, case-level splits and the synthetic tissue generator.

On-disk layout (paths relative to the dataset root)::

    manifest.json                           layout, channel names, per-case split
    <case_id>/<patch_id>_ihc.png            8-bit RGB brightfield patch
    <case_id>/<patch_id>_mif_<marker>.png   8-bit grayscale, one per marker
    <case_id>/<patch_id>_mif.npz            optional lossless stack (replaces the PNGs)
    <case_id>/<patch_id>_labels.png         16-bit ground-truth instances (synthetic only)
    <case_id>/<patch_id>_nuclei.json        ground-truth nuclei records (synthetic only)
    priors/<case_id>/<patch_id>.png         16-bit precomputed probability map

The directory tree does not encode splits; ``manifest.json`` does.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage as ndi

from .core import (
    ImagePatch, MifStack, read_png, read_stack, resize_array, write_label_png, write_png,
)
from .errors import DataError, ParameterError
from .prior import BlobBackend, SoftPrior

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PRIORS_DIR = "priors"
LAYOUT_CHANNELS = {
    "deepliif_like": ("DAPI", "Lap2", "Ki67"),
    "hnscc_like": ("DAPI",),
}
SPLITS = ("train", "val", "test")

# Optical-density stain vectors (hematoxylin, DAB) used for brightfield rendering.
HEMATOXYLIN_OD = np.array([0.650, 0.704, 0.286])
DAB_OD = np.array([0.268, 0.570, 0.776])
STROMA_OD = np.array([0.20, 0.45, 0.30])
OD_SCALE = 1.6


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class PairedSample:
    case_id: str
    patch_id: str
    ihc: ImagePatch
    mif: MifStack
    prior: SoftPrior | None = None

    def __post_init__(self):
        if not self.case_id:
            raise DataError("case_id must be non-empty")
        if self.ihc.data.shape[:2] != self.mif.data.shape[:2]:
            raise DataError(f"{self.key}: IHC and mIF are not co-registered")

    @property
    def key(self) -> str:
        return f"{self.case_id}/{self.patch_id}"


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class SplitManifest:
    assignment: dict[str, str]
    seed: int

    def cases(self, split: str) -> list[str]:
        return sorted(c for c, s in self.assignment.items() if s == split)

    def split_of(self, case_id: str) -> str:
        return self.assignment[case_id]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(dict(d["assignment"]), int(d["seed"]))


def make_splits(samples_or_cases, seed: int = 0, fractions: dict | None = None,
                val_fraction: float = 0.2) -> SplitManifest:
    """Case-level partition into train / val / test.

    ``fractions`` gives the train pool (which includes validation) and test
    shares; validation takes ``val_fraction`` of the train-pool cases, rounded
    half-up with a minimum of one.
    """
    fractions = fractions or {"train": 0.8, "test": 0.2}
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must sum to 1, got {fractions}")
    cases = sorted({getattr(s, "case_id", s) for s in samples_or_cases})
    if len(cases) < 3:
        raise DataError(f"need at least 3 distinct cases for a split, got {len(cases)}")
    order = np.random.default_rng(seed).permutation(len(cases))
    shuffled = [cases[i] for i in order]
    n_test = min(max(round_half_up(len(cases) * fractions.get("test", 0.0)), 1), len(cases) - 2)
    n_pool = len(cases) - n_test
    n_val = min(max(round_half_up(n_pool * val_fraction), 1), n_pool - 1)
    assignment = {}
    for i, case in enumerate(shuffled):
        if i < n_test:
            assignment[case] = "test"
        elif i < n_test + n_val:
            assignment[case] = "val"
        else:
            assignment[case] = "train"
    return SplitManifest(assignment, seed)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

@dataclass
class SkipRecord:
    case_id: str
    patch_id: str
    reason: str


class AccessLog:
    """Records which cases a process has read (leakage audit)."""

    def __init__(self):
        self.cases: set[str] = set()

    def record(self, case_id: str) -> None:
        self.cases.add(case_id)


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def write_manifest(root: str | Path, layout: str, channel_names: Sequence[str],
                   patches: dict[str, list[str]], splits: SplitManifest | None = None,
                   extra: dict | None = None) -> None:
    doc = {
        "format_version": 1,
        "layout": layout,
        "channel_names": list(channel_names),
        "split_seed": splits.seed if splits else None,
        "cases": [
            {"case_id": c, "split": splits.assignment.get(c) if splits else None,
             "patches": sorted(p)}
            for c, p in sorted(patches.items())
        ],
    }
    if extra:
        doc.update(extra)
    Path(root).mkdir(parents=True, exist_ok=True)
    (Path(root) / MANIFEST_NAME).write_text(json.dumps(doc, indent=2) + "\n")


def manifest_splits(root: str | Path) -> SplitManifest | None:
    doc = read_manifest(root)
    assignment = {c["case_id"]: c["split"] for c in doc.get("cases", []) if c.get("split")}
    if not assignment:
        return None
    return SplitManifest(assignment, int(doc.get("split_seed") or 0))


def _patch_ids(case_dir: Path) -> set[str]:
    ids = set()
    for f in case_dir.iterdir():
        name = f.name
        if name.endswith("_ihc.png"):
            ids.add(name[: -len("_ihc.png")])
        elif name.endswith("_mif.npz"):
            ids.add(name[: -len("_mif.npz")])
        elif "_mif_" in name and name.endswith(".png"):
            ids.add(name.split("_mif_")[0])
    return ids


def _load_mif(case_dir: Path, pid: str, channels: Sequence[str]) -> np.ndarray | None:
    npz = case_dir / f"{pid}_mif.npz"
    if npz.exists():
        data, names = read_stack(npz)
        return np.stack([data[:, :, names.index(c)] for c in channels], axis=2)
    planes = []
    for c in channels:
        path = case_dir / f"{pid}_mif_{c}.png"
        if not path.exists():
            return None
        plane = read_png(path)
        planes.append(plane.mean(axis=2) if plane.ndim == 3 else plane)
    return np.stack(planes, axis=2)


def load_dataset(root: str | Path, layout: str = "deepliif_like", size: int | None = 256,
                 cases: Iterable[str] | None = None, access_log: AccessLog | None = None):
    """Load paired samples from ``root``.

    Returns ``(samples, skipped)``: incomplete pairs are reported in
    ``skipped`` and left out.  ``cases`` restricts reading to those case ids so
    held-out cases are never opened.  ``size=None`` keeps native resolution.
    """
    root = Path(root)
    if layout not in LAYOUT_CHANNELS:
        raise DataError(f"unknown layout {layout!r}")
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    channels = LAYOUT_CHANNELS[layout]
    wanted = set(cases) if cases is not None else None
    samples: list[PairedSample] = []
    skipped: list[SkipRecord] = []
    case_dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name != PRIORS_DIR)
    for case_dir in case_dirs:
        case_id = case_dir.name
        if wanted is not None and case_id not in wanted:
            continue
        if access_log is not None:
            access_log.record(case_id)
        for pid in sorted(_patch_ids(case_dir)):
            ihc_path = case_dir / f"{pid}_ihc.png"
            if not ihc_path.exists():
                skipped.append(SkipRecord(case_id, pid, "missing IHC patch"))
                continue
            mif = _load_mif(case_dir, pid, channels)
            if mif is None:
                skipped.append(SkipRecord(case_id, pid, "missing mIF channel(s)"))
                continue
            ihc = read_png(ihc_path)
            if ihc.ndim == 2:
                ihc = np.repeat(ihc[:, :, None], 3, axis=2)
            prior = None
            prior_path = root / PRIORS_DIR / case_id / f"{pid}.png"
            if prior_path.exists():
                prior = read_png(prior_path)
            if size is not None:
                ihc = resize_array(ihc, size)
                mif = resize_array(mif, size)
                if prior is not None:
                    prior = resize_array(prior, size)
            elif ihc.shape[:2] != mif.shape[:2]:
                skipped.append(SkipRecord(case_id, pid, "IHC and mIF sizes differ"))
                continue
            if prior is not None and prior.shape != ihc.shape[:2]:
                prior = resize_array(prior, ihc.shape[:2])
            samples.append(PairedSample(
                case_id, pid, ImagePatch(ihc), MifStack(mif, channels, 0),
                SoftPrior(np.clip(prior, 0, 1)) if prior is not None else None,
            ))
    for rec in skipped:
        log.warning("skipped %s/%s: %s", rec.case_id, rec.patch_id, rec.reason)
    if not samples:
        raise DataError(f"no complete samples found under {root}")
    return samples, skipped


# ---------------------------------------------------------------------------
# Synthetic tissue
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTissueSpec:
    n_nuclei: int = 20
    nucleus_radius_range: tuple[float, float] = (3.0, 5.0)
    ki67_positive_fraction: float = 0.3
    marker_channels: tuple[str, ...] = ("DAPI", "Lap2", "Ki67")
    noise_sigma: float = 0.03
    seed: int = 0
    image_size: int = 64
    min_gap: float = 2.0
    hematoxylin_range: tuple[float, float] = (0.25, 1.0)
    blur_sigma: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "nucleus_radius_range", tuple(float(r) for r in self.nucleus_radius_range))
        object.__setattr__(self, "marker_channels", tuple(self.marker_channels))
        object.__setattr__(self, "hematoxylin_range", tuple(float(v) for v in self.hematoxylin_range))
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.ki67_positive_fraction <= 1.0:
            raise ParameterError(f"ki67_positive_fraction must lie in [0, 1], got {self.ki67_positive_fraction}")
        lo, hi = self.nucleus_radius_range
        if lo < 2 or hi < lo:
            raise ParameterError(f"nucleus radius range must satisfy 2 <= min <= max, got {self.nucleus_radius_range}")
        if self.n_nuclei < 0:
            raise ParameterError("n_nuclei must be non-negative")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be non-negative")
        if "DAPI" not in self.marker_channels:
            raise ParameterError("marker_channels must include DAPI")
        unknown = set(self.marker_channels) - {"DAPI", "Lap2", "Ki67"}
        if unknown:
            raise ParameterError(f"unknown marker channels {sorted(unknown)}")
        if self.image_size < 16:
            raise ParameterError("image_size must be at least 16")


@dataclass(frozen=True)
class NucleusRecord:
    label: int
    row: float
    col: float
    radius: float
    ki67_positive: bool
    dapi_intensity: float
    hematoxylin: float


@dataclass
class SyntheticPair:
    sample: PairedSample
    labels: np.ndarray
    nuclei: list[NucleusRecord]

    @property
    def centers(self) -> list[tuple[float, float, float]]:
        return [(n.row, n.col, n.radius) for n in self.nuclei]

    def prior_backend(self) -> BlobBackend:
        return BlobBackend(self.centers)


def _place_nuclei(spec: SyntheticTissueSpec, rng: np.random.Generator):
    size = spec.image_size
    lo, hi = spec.nucleus_radius_range
    placed: list[tuple[float, float, float]] = []
    attempts = 0
    max_attempts = 500 * max(spec.n_nuclei, 1)
    while len(placed) < spec.n_nuclei:
        attempts += 1
        if attempts > max_attempts:
            raise ParameterError(
                f"could only place {len(placed)} of {spec.n_nuclei} non-overlapping nuclei "
                f"in a {size}x{size} patch; lower n_nuclei or the radius range"
            )
        r = rng.uniform(lo, hi)
        margin = r + 1.0
        row = rng.uniform(margin, size - 1 - margin)
        col = rng.uniform(margin, size - 1 - margin)
        # +1 covers the anti-aliased rim of both disks
        if all(np.hypot(row - pr, col - pc) >= r + pr_rad + spec.min_gap + 1.0
               for pr, pc, pr_rad in placed):
            placed.append((row, col, r))
    return placed


def _smooth_noise(rng, shape, sigma):
    field_ = ndi.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    std = field_.std()
    return field_ / std if std > 0 else field_


def generate_synthetic_pair(spec: SyntheticTissueSpec, case_id: str = "case000",
                            patch_id: str = "p000") -> SyntheticPair:
    """Render one co-registered brightfield / mIF pair with exact ground truth.

    mIF: DAPI = textured nuclear disks with per-nucleus intensity jitter, Ki67
    = the positive subset, Lap2 = nuclear rims.  Brightfield: Beer-Lambert
    mixing of hematoxylin (all nuclei, variable density), DAB (Ki67-positive
    nuclei) and a faint stromal field, blurred, plus Gaussian noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    centers = _place_nuclei(spec, rng)
    n = len(centers)
    n_pos = round_half_up(n * spec.ki67_positive_fraction)
    positive = np.zeros(n, dtype=bool)
    if n_pos:
        positive[rng.choice(n, size=n_pos, replace=False)] = True

    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    texture = 1.0 + 0.15 * _smooth_noise(rng, (size, size), 1.2)
    ki_texture = 1.0 + 0.15 * _smooth_noise(rng, (size, size), 1.0)

    dapi = np.zeros((size, size))
    ki67 = np.zeros((size, size))
    lap2 = np.zeros((size, size))
    hema = np.zeros((size, size))
    dab = np.zeros((size, size))
    labels = np.zeros((size, size), dtype=np.int32)
    records = []
    h_lo, h_hi = spec.hematoxylin_range
    for i, (r0, c0, rad) in enumerate(centers):
        d = np.hypot(rows - r0, cols - c0)
        cov = np.clip(rad + 0.5 - d, 0.0, 1.0)
        a = rng.uniform(0.6, 1.0)
        b = rng.uniform(0.6, 1.0)
        rim = rng.uniform(0.5, 0.9)
        h = rng.uniform(h_lo, h_hi)
        dapi = np.maximum(dapi, cov * a)
        lap2 = np.maximum(lap2, rim * np.clip(1.0 - np.abs(d - (rad - 1.0)), 0.0, 1.0))
        hema = np.maximum(hema, cov * h)
        if positive[i]:
            ki67 = np.maximum(ki67, cov * b)
            dab = np.maximum(dab, cov * rng.uniform(0.5, 0.9))
        labels[d <= rad] = i + 1
        records.append(NucleusRecord(i + 1, float(r0), float(c0), float(rad), bool(positive[i]),
                                     float(a), float(h)))
    dapi = np.clip(dapi * texture, 0.0, 1.0)
    ki67 = np.clip(ki67 * ki_texture, 0.0, 1.0)
    planes = {"DAPI": dapi, "Lap2": np.clip(lap2, 0.0, 1.0), "Ki67": ki67}
    mif = np.stack([planes[c] for c in spec.marker_channels], axis=2)

    stroma = np.clip(0.12 + 0.08 * _smooth_noise(rng, (size, size), 4.0), 0.0, None)
    od = (OD_SCALE * (hema * texture)[:, :, None] * HEMATOXYLIN_OD
          + OD_SCALE * dab[:, :, None] * DAB_OD
          + stroma[:, :, None] * STROMA_OD)
    rgb = 0.96 * np.exp(-od)
    if spec.blur_sigma > 0:
        rgb = ndi.gaussian_filter(rgb, (spec.blur_sigma, spec.blur_sigma, 0), mode="reflect")
    rgb = np.clip(rgb + rng.normal(0.0, spec.noise_sigma, rgb.shape), 0.0, 1.0)

    names = spec.marker_channels
    sample = PairedSample(case_id, patch_id, ImagePatch(rgb), MifStack(mif, names, names.index("DAPI")))
    pair = SyntheticPair(sample, labels, records)
    sample.prior = SoftPrior(pair.prior_backend().render((size, size)))
    return pair


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """A synthetic dataset: ``n_cases`` x ``patches_per_case`` tissue patches."""

    n_cases: int = 8
    patches_per_case: int = 4
    layout: str = "deepliif_like"
    tissue: SyntheticTissueSpec = field(default_factory=SyntheticTissueSpec)
    split_seed: int | None = None
    n_nuclei_jitter: int = 0

    def __post_init__(self):
        if self.n_cases < 1 or self.patches_per_case < 1:
            raise ParameterError("n_cases and patches_per_case must be positive")
        if self.layout not in LAYOUT_CHANNELS:
            raise ParameterError(f"unknown layout {self.layout!r}")
        if tuple(self.tissue.marker_channels) != LAYOUT_CHANNELS[self.layout]:
            object.__setattr__(self, "tissue", _replace_markers(self.tissue, LAYOUT_CHANNELS[self.layout]))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        d = dict(d)
        tissue_keys = SyntheticTissueSpec.__dataclass_fields__.keys()
        tissue = {k: d.pop(k) for k in list(d) if k in tissue_keys}
        if "tissue" in d:
            tissue.update(d.pop("tissue"))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown synthetic spec keys {sorted(unknown)}")
        return cls(tissue=SyntheticTissueSpec(**tissue), **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tissue"] = asdict(self.tissue)
        return d


def _replace_markers(t: SyntheticTissueSpec, markers) -> SyntheticTissueSpec:
    d = asdict(t)
    d["marker_channels"] = tuple(markers)
    return SyntheticTissueSpec(**d)


def patch_seed(base_seed: int, case_index: int, patch_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, case_index, patch_index]).generate_state(1)[0])


def generate_synthetic_dataset(spec: SyntheticDatasetSpec):
    """Yield :class:`SyntheticPair` objects for every case/patch, deterministically."""
    base = asdict(spec.tissue)
    for ci in range(spec.n_cases):
        for pi in range(spec.patches_per_case):
            seed = patch_seed(spec.tissue.seed, ci, pi)
            t = dict(base, seed=seed)
            if spec.n_nuclei_jitter:
                jitter = np.random.default_rng(seed).integers(-spec.n_nuclei_jitter, spec.n_nuclei_jitter + 1)
                t["n_nuclei"] = max(1, spec.tissue.n_nuclei + int(jitter))
            yield generate_synthetic_pair(SyntheticTissueSpec(**t), f"case{ci:03d}", f"p{pi:03d}")


def write_sample(root: str | Path, sample: PairedSample, labels: np.ndarray | None = None,
                 nuclei: Sequence[NucleusRecord] | None = None) -> None:
    root = Path(root)
    case_dir = root / sample.case_id
    write_png(case_dir / f"{sample.patch_id}_ihc.png", sample.ihc.data)
    for i, name in enumerate(sample.mif.channel_names):
        write_png(case_dir / f"{sample.patch_id}_mif_{name}.png", sample.mif.data[:, :, i])
    if sample.prior is not None:
        write_png(root / PRIORS_DIR / sample.case_id / f"{sample.patch_id}.png", sample.prior.prob, bits=16)
    if labels is not None:
        write_label_png(case_dir / f"{sample.patch_id}_labels.png", labels)
    if nuclei is not None:
        (case_dir / f"{sample.patch_id}_nuclei.json").write_text(
            json.dumps([asdict(n) for n in nuclei], indent=1) + "\n"
        )


def write_synthetic_dataset(root: str | Path, spec: SyntheticDatasetSpec) -> SplitManifest | None:
    """Render ``spec`` to ``root`` in the documented layout; splits go in the manifest."""
    root = Path(root)
    patches: dict[str, list[str]] = {}
    for pair in generate_synthetic_dataset(spec):
        s = pair.sample
        write_sample(root, s, pair.labels, pair.nuclei)
        patches.setdefault(s.case_id, []).append(s.patch_id)
    splits = None
    if spec.split_seed is not None and len(patches) >= 3:
        splits = make_splits(list(patches), seed=spec.split_seed)
    write_manifest(root, spec.layout, spec.tissue.marker_channels, patches, splits,
                   extra={"synthetic_spec": spec.to_dict()})
    return splits


def load_nuclei(root: str | Path, case_id: str, patch_id: str) -> list[NucleusRecord]:
    path = Path(root) / case_id / f"{patch_id}_nuclei.json"
    return [NucleusRecord(**d) for d in json.loads(path.read_text())]
