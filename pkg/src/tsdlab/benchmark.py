"""Build an occlusion benchmark with holistic queries from a dataset manifest.

The training split passes through untouched. The original query and gallery
splits merge into one gallery. Holistic images of identities that appeared
in the original query split form the candidate pool, and up to
``max_per_id`` of them per identity are drawn (seeded, without replacement)
as the new queries. Queries stay in the gallery; evaluation excludes each
query from its own ranking.
"""
from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .labels import Occlusion

MANIFEST_FIELDS = ("image_id", "identity", "camera", "split", "occlusion")
SPLITS = ("train", "query", "gallery")
MAX_QUERIES_PER_ID = 5


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    image_id: str
    identity: int
    camera: int
    split: str
    occlusion: Occlusion = Occlusion.UNLABELED

    def row(self) -> list:
        return [self.image_id, self.identity, self.camera, self.split, self.occlusion.value]


@dataclass
class DatasetManifest:
    records: list[Record]

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise ManifestError(f"duplicate image id {r.image_id!r}")
            seen.add(r.image_id)
            if r.split not in SPLITS:
                raise ManifestError(f"unknown split {r.split!r} for {r.image_id!r}")

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]


def read_manifest(path: str | Path) -> DatasetManifest:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                records.append(Record(row["image_id"], int(row["identity"]), int(row["camera"]),
                                      row["split"].strip(), Occlusion.parse(row["occlusion"] or "Unlabeled")))
            except ValueError as exc:
                raise ManifestError(f"{path}:{line}: {exc}") from exc
    return DatasetManifest(records)


def write_manifest(path: str | Path, records: Iterable[Record]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow(r.row())


@dataclass
class BenchmarkSplit:
    train: list[Record]
    gallery: list[Record]
    query: list[Record]
    seed: int
    source_hash: str = ""


def manifest_hash(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for r in manifest.records:
        h.update(("\x1f".join(map(str, r.row())) + "\n").encode())
    return h.hexdigest()


def build(manifest: DatasetManifest, seed: int, max_per_id: int = MAX_QUERIES_PER_ID) -> BenchmarkSplit:
    train = manifest.split("train")
    orig_query = manifest.split("query")
    gallery = [r for r in manifest.records if r.split in ("query", "gallery")]
    query_ids = sorted({r.identity for r in orig_query})
    qid_set = set(query_ids)

    unlabeled = [r.image_id for r in gallery if r.identity in qid_set and r.occlusion is Occlusion.UNLABELED]
    if unlabeled:
        raise ManifestError(
            f"{len(unlabeled)} images of query identities lack an occlusion annotation, e.g. {unlabeled[0]!r}")

    candidates: dict[int, list[Record]] = defaultdict(list)
    for r in gallery:
        if r.identity in qid_set and r.occlusion is Occlusion.HOLISTIC:
            candidates[r.identity].append(r)

    rng = np.random.default_rng(seed)
    query: list[Record] = []
    for pid in query_ids:
        pool = candidates.get(pid, [])
        if not pool:
            continue
        k = min(max_per_id, len(pool))
        picked = rng.choice(len(pool), size=k, replace=False)
        query.extend(pool[i] for i in sorted(picked))
    return BenchmarkSplit(train, gallery, query, seed, manifest_hash(manifest))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    queries_per_id: dict[int, int] = field(default_factory=dict)
    query_occlusion: dict[str, int] = field(default_factory=dict)
    gallery_occlusion: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(split: BenchmarkSplit, max_per_id: int = MAX_QUERIES_PER_ID) -> ValidationReport:
    rep = ValidationReport()
    rep.queries_per_id = dict(sorted(Counter(r.identity for r in split.query).items()))
    rep.query_occlusion = dict(Counter(r.occlusion.value for r in split.query))
    rep.gallery_occlusion = dict(Counter(r.occlusion.value for r in split.gallery))

    for r in split.query:
        if r.occlusion is not Occlusion.HOLISTIC:
            rep.violations.append(f"query {r.image_id} is {r.occlusion.value}, not Holistic")
    for pid, n in rep.queries_per_id.items():
        if n > max_per_id:
            rep.violations.append(f"identity {pid} has {n} queries (max {max_per_id})")
    dup = [im for im, n in Counter(r.image_id for r in split.query).items() if n > 1]
    for im in dup:
        rep.violations.append(f"query image {im} appears more than once")
    gallery_ids = {r.identity for r in split.gallery}
    for pid in rep.queries_per_id:
        if pid not in gallery_ids:
            rep.violations.append(f"query identity {pid} is absent from the gallery")
    return rep


def save_split(split: BenchmarkSplit, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("train", "gallery", "query")}
    write_manifest(paths["train"], split.train)
    write_manifest(paths["gallery"], split.gallery)
    write_manifest(paths["query"], split.query)
    paths["provenance"] = out / "provenance.json"
    with open(paths["provenance"], "w") as fh:
        json.dump({
            "seed": split.seed,
            "input_sha256": split.source_hash,
            "max_queries_per_id": MAX_QUERIES_PER_ID,
            "counts": {
                "train": len(split.train),
                "gallery": len(split.gallery),
                "gallery_ids": len({r.identity for r in split.gallery}),
                "query": len(split.query),
                "query_ids": len({r.identity for r in split.query}),
            },
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
