"""Embedding files: a tensor container plus a tab-separated index.

The container holds ``global`` [n, D] and, for part models, ``parts``
[n, P, D] and ``visibility`` [n, P]. Row i of every tensor belongs to line
i of the index, whose columns are image_id, identity, camera, occlusion.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import checkpoint
from .labels import Occlusion
from .matching import EmbeddingSet

INDEX_FIELDS = ("image_id", "identity", "camera", "occlusion")
FORMAT_KEY = "__embedding_format__"
FORMAT_VERSION = 1


def index_path_for(path: str | Path) -> Path:
    return Path(path).with_suffix(".tsv")


def save_embeddings(path: str | Path, emb: EmbeddingSet, index_path: str | Path | None = None) -> Path:
    tensors = {FORMAT_KEY: np.array([FORMAT_VERSION], dtype=np.float64), "global": emb.global_}
    if emb.parts is not None:
        tensors["parts"] = emb.parts
    if emb.visibility is not None:
        tensors["visibility"] = emb.visibility
    checkpoint.save(path, tensors)
    index_path = Path(index_path) if index_path else index_path_for(path)
    with open(index_path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(INDEX_FIELDS)
        for im, pid, cam, occ in zip(emb.image_ids, emb.ids, emb.cams, emb.occlusion):
            writer.writerow([im, int(pid), int(cam), Occlusion.parse(occ).value])
    return index_path


def load_embeddings(path: str | Path, index_path: str | Path | None = None) -> EmbeddingSet:
    tensors = checkpoint.load(path)
    version = tensors.get(FORMAT_KEY)
    if version is None or int(version[0]) != FORMAT_VERSION:
        raise checkpoint.CheckpointError(f"{path} is not a version-{FORMAT_VERSION} embedding file")
    index_path = Path(index_path) if index_path else index_path_for(path)
    with open(index_path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if len(rows) != len(tensors["global"]):
        raise ValueError(f"index has {len(rows)} rows but embeddings hold {len(tensors['global'])}")
    return EmbeddingSet(
        image_ids=[r["image_id"] for r in rows],
        ids=np.array([int(r["identity"]) for r in rows]),
        cams=np.array([int(r["camera"]) for r in rows]),
        occlusion=[Occlusion.parse(r["occlusion"]) for r in rows],
        global_=tensors["global"],
        parts=tensors.get("parts"),
        visibility=tensors.get("visibility"),
    )
