"""Dataset manifests, identity-disjoint splits and pixel-wise label maps."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MEDIA = ("D", "PS")
LABELS = ("bonafide", "attack")
SPLITS = ("train", "dev", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
# A re-digitized record's id is its digital source id plus this suffix.
PS_SUFFIX = "__ps"

MANIFEST_HEADER = ["image_id", "path", "identities", "medium", "label", "split"]


class ManifestError(ValueError):
    pass


class SplitError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    image_id: str
    path: str
    identity_ids: frozenset[str]
    medium: str = "D"
    label: str = "bonafide"
    split: str = "unassigned"

    def __post_init__(self):
        object.__setattr__(self, "identity_ids", frozenset(self.identity_ids))
        if self.medium not in MEDIA:
            raise ManifestError(f"{self.image_id}: unknown medium {self.medium!r}")
        if self.label not in LABELS:
            raise ManifestError(f"{self.image_id}: unknown label {self.label!r}")
        if self.split not in SPLITS + ("unassigned",):
            raise ManifestError(f"{self.image_id}: unknown split {self.split!r}")
        expected = 2 if self.label == "attack" else 1
        if len(self.identity_ids) != expected:
            raise ManifestError(
                f"{self.image_id}: {self.label} needs {expected} identities, got {sorted(self.identity_ids)}"
            )

    @property
    def is_attack(self) -> bool:
        return self.label == "attack"

    @property
    def source_id(self) -> str:
        """Digital record this one was derived from (itself for D records)."""
        if self.medium == "PS" and self.image_id.endswith(PS_SUFFIX):
            return self.image_id[: -len(PS_SUFFIX)]
        return self.image_id


def _list_images(directory) -> dict[str, Path]:
    if directory is None:
        return {}
    directory = Path(directory)
    if not directory.is_dir():
        raise ManifestError(f"not a directory: {directory}")
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in out:
                raise ManifestError(f"duplicate image id {p.stem!r} in {directory}")
            out[p.stem] = p
    return out


def build_manifest(
    bonafide_dir,
    attack_dir,
    redigitized_dirs: Sequence = (),
    metadata: Mapping[str, Sequence[str]] | None = None,
    known_identities: Iterable[str] | None = None,
) -> list[SampleRecord]:
    """Scan image directories into validated records.

    ``metadata`` maps image stems to identity lists (one for bona fide, two
    for attacks). Files in ``redigitized_dirs`` must share the stem of a
    digital file; they inherit its identities and label. When
    ``known_identities`` is given every referenced identity must be in it.
    """
    metadata = metadata or {}
    bona = _list_images(bonafide_dir)
    atk = _list_images(attack_dir)
    clash = sorted(set(bona) & set(atk))
    if clash:
        raise ManifestError(f"image ids in both bona fide and attack dirs: {clash}")

    missing = sorted(i for i in list(bona) + list(atk) if i not in metadata)
    if missing:
        raise ManifestError(f"no identity metadata for: {missing}")

    records: dict[str, SampleRecord] = {}
    for label, files in (("bonafide", bona), ("attack", atk)):
        for image_id, path in files.items():
            records[image_id] = SampleRecord(image_id, str(path), frozenset(metadata[image_id]), "D", label)

    if known_identities is not None:
        known = set(known_identities)
        bad = sorted(r.image_id for r in records.values() if not r.identity_ids <= known)
        if bad:
            raise ManifestError(f"records referencing unknown identities: {bad}")

    orphans = []
    for d in redigitized_dirs:
        for stem, path in _list_images(d).items():
            src = records.get(stem)
            if src is None or src.medium != "D":
                orphans.append(str(path))
                continue
            ps_id = stem + PS_SUFFIX
            if ps_id in records:
                raise ManifestError(f"duplicate re-digitized image {ps_id!r}")
            records[ps_id] = SampleRecord(ps_id, str(path), src.identity_ids, "PS", src.label)
    if orphans:
        raise ManifestError(f"re-digitized files without a digital source: {orphans}")
    return [records[k] for k in sorted(records)]


def write_manifest(path, records: Iterable[SampleRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in sorted(records, key=lambda r: r.image_id):
            w.writerow([r.image_id, r.path, ";".join(sorted(r.identity_ids)), r.medium, r.label, r.split])


def read_manifest(path) -> list[SampleRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ManifestError(f"bad manifest header {reader.fieldnames}")
        return [
            SampleRecord(
                row["image_id"],
                row["path"],
                frozenset(row["identities"].split(";")),
                row["medium"],
                row["label"],
                row["split"],
            )
            for row in reader
        ]


# ------------------------------------------------------------------- splits


@dataclass
class SplitManifest:
    assignments: dict[str, str]
    seed: int
    ratios: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    stats: dict[str, int] = field(default_factory=dict)

    def apply(self, records: Iterable[SampleRecord]) -> list[SampleRecord]:
        return [replace(r, split=self.assignments[r.image_id]) for r in records]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "assignments": dict(sorted(self.assignments.items())),
            "stats": dict(sorted(self.stats.items())),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> SplitManifest:
        return cls(dict(data["assignments"]), int(data["seed"]), tuple(data["ratios"]), dict(data["stats"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> SplitManifest:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def identity_components(records: Sequence[SampleRecord]) -> list[list[SampleRecord]]:
    """Group records into connected components of the identity-sharing graph."""
    parent: dict[str, str] = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for r in records:
        ids = sorted(r.identity_ids)
        for other in ids[1:]:
            ra, rb = find(ids[0]), find(other)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups = defaultdict(list)
    for r in records:
        groups[find(next(iter(r.identity_ids)))].append(r)
    return [sorted(groups[k], key=lambda r: r.image_id) for k in sorted(groups)]


def split_stats(records: Iterable[SampleRecord], assignments: Mapping[str, str]) -> dict[str, int]:
    c = Counter(f"{assignments[r.image_id]}/{r.medium}/{r.label}" for r in records)
    return dict(sorted(c.items()))


def split_identity_disjoint(
    records: Sequence[SampleRecord],
    ratios: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
    seed: int = 0,
    attributes: Mapping[str, str] | None = None,
) -> SplitManifest:
    """Assign identity components to train/dev/test.

    Components of the identity graph move atomically, so every contributor of
    an attack lands in the same split as the attack. Components are visited
    largest first (random order within a size, from ``seed``) and each goes to
    the split whose per-class counts it brings closest to target. With
    ``attributes`` (identity -> e.g. gender) the balance is also kept per
    attribute value.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate image ids in records")

    comps = identity_components(records)
    n = len(records)
    if n == 0:
        return SplitManifest({}, seed, ratios, {})
    largest = max(ratios) * n
    too_big = [c for c in comps if len(c) > largest]
    if too_big:
        raise SplitError(
            f"identity component of {len(too_big[0])} samples exceeds the largest split target "
            f"({largest:.1f}); split it manually"
        )

    def klass(r: SampleRecord, comp_attr: str | None):
        return (r.label, comp_attr) if attributes is not None else (r.label,)

    comp_keys = []
    for comp in comps:
        attr = None
        if attributes is not None:
            vals = Counter(attributes.get(i, "?") for r in comp for i in r.identity_ids)
            attr = min(vals, key=lambda v: (-vals[v], v))
        comp_keys.append(Counter(klass(r, attr) for r in comp))

    classes = sorted({k for ck in comp_keys for k in ck})
    totals = Counter()
    for ck in comp_keys:
        totals.update(ck)
    target = np.array([[ratios[s] * totals[c] for c in classes] for s in range(3)])
    counts = np.zeros_like(target)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(comps))
    order = sorted(order, key=lambda i: -len(comps[i]))  # stable: ties keep the shuffled order

    assignment = {}
    for i in order:
        add = np.array([comp_keys[i][c] for c in classes], dtype=float)
        best, best_cost = None, None
        for s in range(3):
            if ratios[s] == 0:
                continue
            trial = counts.copy()
            trial[s] += add
            cost = float(np.sum((trial - target) ** 2 / np.maximum(target, 1.0)))
            if best_cost is None or cost < best_cost - 1e-12:
                best, best_cost = s, cost
        counts[best] += add
        for r in comps[i]:
            assignment[r.image_id] = SPLITS[best]

    return SplitManifest(assignment, seed, ratios, split_stats(records, assignment))


def split_identities(records: Iterable[SampleRecord]) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {s: set() for s in SPLITS}
    for r in records:
        if r.split in out:
            out[r.split] |= r.identity_ids
    return out


# -------------------------------------------------------------- label maps


@dataclass(frozen=True)
class PixelLabelMap:
    grid: np.ndarray
    label: str


def make_pixel_labels(record: SampleRecord | str, grid_size=(14, 14)) -> PixelLabelMap:
    """Constant ground-truth map: all ones for attacks, all zeros for bona fide."""
    label = record if isinstance(record, str) else record.label
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}")
    if isinstance(grid_size, int):
        grid_size = (grid_size, grid_size)
    fill = 1.0 if label == "attack" else 0.0
    return PixelLabelMap(np.full(tuple(grid_size), fill, dtype=np.float32), label)
