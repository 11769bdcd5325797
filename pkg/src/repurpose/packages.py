"""Core domain types: multimodal packages, GPS normalization, validation, serialization.

A *package* is one multimodal record: caption tokens with tagged entity
spans, GPS coordinates, location names, and integrity labels. Everything
here is immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from decimal import ROUND_DOWN, Decimal
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

SPLITS = ("reference", "train", "val", "test", "unassigned")
INTEGRITY_LABELS = ("clean", "manipulated", "unknown")
MANIPULATION_TYPES = ("none", "location", "person", "organization")
ENTITY_KINDS = ("person", "organization", "location")
MODALITIES = ("image", "text", "gps")


class ValidationError(ValueError):
    """Raised when an input violates a hard precondition."""


@dataclass(frozen=True)
class EntitySpan:
    """Half-open token span ``[start, end)`` tagged with an entity kind."""

    start: int
    end: int
    kind: str
    surface: str

    def overlaps(self, other: "EntitySpan") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class LocationNames:
    country: str = ""
    county: str = ""
    region: str = ""
    locality: str = ""

    def as_tuple(self) -> tuple[str, str, str, str]:
        return (self.country, self.county, self.region, self.locality)


@dataclass(frozen=True)
class Package:
    """One multimodal record. Immutable; use :func:`dataclasses.replace` to derive."""

    id: str
    tokens: tuple[str, ...]
    entities: tuple[EntitySpan, ...] = ()
    gps: tuple[float, float] = (0.0, 0.0)
    loc_names: LocationNames = field(default_factory=LocationNames)
    cluster_id: int | None = None
    split: str = "unassigned"
    integrity_label: str = "clean"
    manipulation_type: str = "none"
    timestamp: str | None = None  # accepted and preserved, never featurized
    source_id: str | None = None  # manipulation provenance, None for clean packages

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "entities", tuple(self.entities))

    @property
    def lat(self) -> float:
        return self.gps[0]

    @property
    def lon(self) -> float:
        return self.gps[1]

    def spans_of_kind(self, kind: str) -> tuple[EntitySpan, ...]:
        return tuple(s for s in self.entities if s.kind == kind)


def normalize_gps(lat: float, lon: float) -> np.ndarray:
    """Map degrees to the unit box: ``(lat/90, lon/180)``.

    Raises :class:`ValidationError` for out-of-range coordinates.
    """
    if not (-90.0 <= lat <= 90.0):
        raise ValidationError(f"latitude {lat!r} outside [-90, 90]")
    if not (-180.0 <= lon <= 180.0):
        raise ValidationError(f"longitude {lon!r} outside [-180, 180]")
    return np.array([lat / 90.0, lon / 180.0], dtype=np.float64)


def denormalize_gps(vec: np.ndarray) -> tuple[float, float]:
    """Inverse of :func:`normalize_gps`."""
    return (float(vec[0]) * 90.0, float(vec[1]) * 180.0)


def truncate_coordinate(value: float, places: int = 2) -> int:
    """Truncate a coordinate toward zero at ``places`` decimals, scaled to an integer.

    Works on the printed decimal expansion so that e.g. 0.29 (stored as
    0.28999...) still truncates to 29. Signed zero collapses to 0.
    """
    quantum = Decimal(1).scaleb(-places)
    q = Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_DOWN)
    return int(q.scaleb(places))


def validate_package(p: Package) -> list[str]:
    """Return one message per violated invariant; empty list means valid."""
    issues: list[str] = []
    if not p.id:
        issues.append("id: must be a non-empty string")
    if not (-90.0 <= p.gps[0] <= 90.0):
        issues.append(f"gps: latitude {p.gps[0]!r} outside [-90, 90]")
    if not (-180.0 <= p.gps[1] <= 180.0):
        issues.append(f"gps: longitude {p.gps[1]!r} outside [-180, 180]")
    if p.split not in SPLITS:
        issues.append(f"split: {p.split!r} not one of {SPLITS}")
    if p.integrity_label not in INTEGRITY_LABELS:
        issues.append(f"integrity_label: {p.integrity_label!r} not one of {INTEGRITY_LABELS}")
    if p.manipulation_type not in MANIPULATION_TYPES:
        issues.append(f"manipulation_type: {p.manipulation_type!r} not one of {MANIPULATION_TYPES}")

    n = len(p.tokens)
    for span in p.entities:
        if not (0 <= span.start < span.end <= n):
            issues.append(
                f"entity span [{span.start}, {span.end}): outside token bounds 0..{n}"
            )
            continue
        joined = " ".join(p.tokens[span.start : span.end])
        if joined != span.surface:
            issues.append(
                f"entity span [{span.start}, {span.end}): surface {span.surface!r}"
                f" != joined tokens {joined!r}"
            )
        if span.kind not in ENTITY_KINDS:
            issues.append(f"entity span [{span.start}, {span.end}): unknown kind {span.kind!r}")
    ordered = sorted(p.entities, key=lambda s: (s.start, s.end))
    for a, b in zip(ordered, ordered[1:]):
        if a.overlaps(b):
            issues.append(
                f"entity spans [{a.start}, {a.end}) and [{b.start}, {b.end}) overlap"
            )

    if p.split == "reference" and p.integrity_label != "clean":
        issues.append("reference purity: split=reference requires integrity_label=clean")
    if (p.manipulation_type != "none") != (p.integrity_label == "manipulated"):
        issues.append(
            "label consistency: manipulation_type != none iff integrity_label=manipulated"
        )
    return issues


# --- serialization -----------------------------------------------------------

def package_to_record(p: Package) -> dict:
    rec = {
        "id": p.id,
        "tokens": list(p.tokens),
        "entities": [
            {"start": s.start, "end": s.end, "kind": s.kind, "surface": s.surface}
            for s in p.entities
        ],
        "gps": {"lat": p.gps[0], "lon": p.gps[1]},
        "loc_names": {
            "country": p.loc_names.country,
            "county": p.loc_names.county,
            "region": p.loc_names.region,
            "locality": p.loc_names.locality,
        },
        "cluster_id": p.cluster_id,
        "split": p.split,
        "integrity_label": p.integrity_label,
        "manipulation_type": p.manipulation_type,
    }
    if p.timestamp is not None:
        rec["timestamp"] = p.timestamp
    if p.source_id is not None:
        rec["source_id"] = p.source_id
    return rec


def package_from_record(rec: dict) -> Package:
    entities = tuple(
        EntitySpan(int(e["start"]), int(e["end"]), e["kind"], e["surface"])
        for e in rec.get("entities", [])
    )
    names = rec.get("loc_names", {})
    return Package(
        id=rec["id"],
        tokens=tuple(rec["tokens"]),
        entities=entities,
        gps=(float(rec["gps"]["lat"]), float(rec["gps"]["lon"])),
        loc_names=LocationNames(
            country=names.get("country", ""),
            county=names.get("county", ""),
            region=names.get("region", ""),
            locality=names.get("locality", ""),
        ),
        cluster_id=rec.get("cluster_id"),
        split=rec.get("split", "unassigned"),
        integrity_label=rec.get("integrity_label", "clean"),
        manipulation_type=rec.get("manipulation_type", "none"),
        timestamp=rec.get("timestamp"),
        source_id=rec.get("source_id"),
    )


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def save_packages(packages: Iterable[Package], path: str | Path) -> None:
    """Write one JSON record per line, UTF-8."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for p in packages:
            fh.write(dumps_record(package_to_record(p)))
            fh.write("\n")


def load_packages(path: str | Path) -> list[Package]:
    path = Path(path)
    out: list[Package] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(package_from_record(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad package record: {exc}") from exc
    return out


@dataclass(frozen=True)
class DatasetManifest:
    """Everything needed to reproduce and audit one generated corpus."""

    seed: int
    split_counts: dict[str, int]
    manipulation_counts: dict[str, int]
    config: dict

    def total(self) -> int:
        return sum(self.split_counts.values())

    def validate(self) -> list[str]:
        issues = []
        manipulated = sum(v for k, v in self.manipulation_counts.items() if k != "none")
        labelled = self.manipulation_counts.get("__manipulated_total__")
        if labelled is not None and labelled != manipulated:
            issues.append("manipulation counts do not sum to the recorded total")
        for k, v in {**self.split_counts, **self.manipulation_counts}.items():
            if v < 0:
                issues.append(f"negative count for {k}")
        return issues

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "split_counts": self.split_counts,
            "manipulation_counts": self.manipulation_counts,
            "config": self.config,
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return DatasetManifest(
            seed=int(doc["seed"]),
            split_counts={k: int(v) for k, v in doc["split_counts"].items()},
            manipulation_counts={k: int(v) for k, v in doc["manipulation_counts"].items()},
            config=doc["config"],
        )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(manifest.to_json(), encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    return DatasetManifest.from_json(Path(path).read_text(encoding="utf-8"))
