"""Training loop, benchmark evaluation and the ablation runner."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import benchmark, checkpoint
from .matching import MetricReport, RankingRun, occluded_metrics
from .model import VARIANTS, RunConfig, TSDModel, variant
from .optim import SGD, cosine_lr
from .synth import SyntheticDataset

log = logging.getLogger(__name__)


class LeakageError(AssertionError):
    """Teacher attention reached a patch outside its part mask."""


def pk_batches(ids: np.ndarray, ids_per_batch: int, instances: int,
               rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of PK batches: ``ids_per_batch`` identities x ``instances`` images.

    Each identity's images are shuffled and cut into chunks of ``instances``
    (short identities are topped up by resampling); chunks are shuffled and
    grouped into batches of distinct identities. Incomplete batches are dropped.
    """
    ids = np.asarray(ids)
    chunks: list[tuple[int, np.ndarray]] = []
    for pid in np.unique(ids):
        idx = rng.permutation(np.flatnonzero(ids == pid))
        if len(idx) < instances:
            idx = np.concatenate([idx, rng.choice(idx, instances - len(idx))])
        for start in range(0, len(idx) - instances + 1, instances):
            chunks.append((int(pid), idx[start:start + instances]))
    order = rng.permutation(len(chunks))
    pending = [chunks[i] for i in order]
    while len({pid for pid, _ in pending}) >= ids_per_batch:
        batch, used, rest = [], set(), []
        for pid, chunk in pending:
            if len(batch) < ids_per_batch and pid not in used:
                batch.append(chunk)
                used.add(pid)
            else:
                rest.append((pid, chunk))
        pending = rest
        yield np.concatenate(batch)


def check_zero_leakage(teacher_attention: np.ndarray, mask: np.ndarray) -> None:
    """Attention [B, H, P, N] must be exactly zero off-mask for every non-empty part."""
    on = mask > 0.5
    nonempty = on.any(axis=-1)
    off = ~on[:, None, :, :] & nonempty[:, None, :, None]
    if np.any(teacher_attention[np.broadcast_to(off, teacher_attention.shape)] != 0.0):
        raise LeakageError("teacher attention leaked outside the part mask")


@dataclass
class TrainResult:
    model: TSDModel
    records: list[dict] = field(default_factory=list)
    label_map: dict[int, int] = field(default_factory=dict)

    def first(self, key: str) -> float:
        return self.records[0][key]

    def last(self, key: str) -> float:
        return self.records[-1][key]


def train(cfg: RunConfig, data: SyntheticDataset, out_dir: str | Path | None = None,
          max_steps: int | None = None, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on the ``train`` split of ``data``.

    With ``out_dir`` set, a JSON-lines log (``train_log.jsonl``) and one
    checkpoint per epoch (``epoch_XXX.tsdt``) are written there.
    """
    train_set = data.where_split("train")
    uniq, counts = np.unique(train_set.ids, return_counts=True)
    if len(uniq) < 2 or counts.min() < cfg.instances_per_id:
        raise ValueError(f"training needs >= 2 identities with >= {cfg.instances_per_id} images each")
    if len(uniq) < cfg.ids_per_batch:
        raise ValueError(f"ids_per_batch={cfg.ids_per_batch} exceeds the {len(uniq)} training identities")
    label_map = {int(pid): i for i, pid in enumerate(uniq)}
    labels = np.array([label_map[int(p)] for p in train_set.ids])

    rng = np.random.default_rng(cfg.seed)
    model = TSDModel(cfg, len(uniq), rng)
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")

    result = TrainResult(model, [], label_map)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
            for batch in pk_batches(labels, cfg.ids_per_batch, cfg.instances_per_id, rng):
                fwd = model.forward(train_set.images[batch], labels[batch], train_set.part_labels[batch], epoch)
                if cfg.check_leakage and fwd.teacher is not None:
                    check_zero_leakage(fwd.teacher.attention, fwd.mask)
                opt.zero_grad()
                fwd.report.total.backward()
                opt.step()
                rec = {"step": step, "epoch": epoch, **fwd.report.as_record(), "lr": opt.lr}
                result.records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                if on_step is not None:
                    on_step(rec)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            if out is not None:
                save_model(model, out / f"epoch_{epoch:03d}.tsdt")
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return result


def save_model(model: TSDModel, path: str | Path) -> None:
    checkpoint.save(path, model.state_dict())


def load_model(path: str | Path, cfg: RunConfig, num_ids: int) -> TSDModel:
    model = TSDModel(cfg, num_ids, np.random.default_rng(0))
    model.load_state_dict(checkpoint.load(path))
    return model


def benchmark_split(data: SyntheticDataset, seed: int) -> benchmark.BenchmarkSplit:
    return benchmark.build(data.manifest(), seed)


def evaluate(model: TSDModel, data: SyntheticDataset, split_seed: int = 0,
             exclude_same_camera: bool = True) -> MetricReport:
    """Embed the benchmark gallery and score the sampled holistic queries."""
    split = benchmark_split(data, split_seed)
    pos = {im: i for i, im in enumerate(data.image_ids)}
    gallery = model.embedding_set(data.subset([pos[r.image_id] for r in split.gallery]))
    query = gallery.select([r.image_id for r in split.query])
    run = RankingRun.from_embeddings(query, gallery, exclude_same_camera, model.cfg.visibility_threshold)
    return occluded_metrics(run)


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: MetricReport
    seconds: float
    final_loss: float


def ablate(base: RunConfig, data_for_seed: Callable[[int], SyntheticDataset], seeds: Sequence[int],
           variants: Sequence[str] = VARIANTS) -> list[AblationRow]:
    rows = []
    for seed in seeds:
        data = data_for_seed(seed)
        for name in variants:
            cfg = variant(base, name)
            cfg.seed = seed
            t0 = time.perf_counter()
            res = train(cfg, data)
            report = evaluate(res.model, data, split_seed=seed)
            rows.append(AblationRow(name, seed, report, time.perf_counter() - t0, res.last("total")))
            occ = report["OCC"]
            log.info("seed %d %-8s OCC-mAP %.4f (%.1fs)", seed, name, occ.mAP if occ else float("nan"),
                     rows[-1].seconds)
    return rows


def summarize(rows: Sequence[AblationRow], families=("ALL", "OCC", "NPO", "NTP")) -> dict[str, dict[str, float]]:
    """Mean rank-1 and mAP per variant and family, over seeds."""
    table: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(r.variant for r in rows):
        mine = [r for r in rows if r.variant == name]
        entry = {}
        for fam in families:
            vals = [r.report[fam] for r in mine if r.report[fam] is not None]
            if vals:
                entry[f"{fam}-R1"] = float(np.mean([v.rank[1] for v in vals]))
                entry[f"{fam}-mAP"] = float(np.mean([v.mAP for v in vals]))
        table[name] = entry
    return table
