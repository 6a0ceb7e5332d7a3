"""Command-line entry point: ``tsdlab <subcommand> ...``.

Exit codes identify the failure class: 0 success, 2 bad arguments (argparse),
3 bad configuration, 4 unreadable or inconsistent input data, 5 a check
failed (gradient suite, benchmark validation, attention leakage), 6 nothing
to evaluate.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import benchmark, checkpoint
from .embeddings import load_embeddings, save_embeddings
from .gradsuite import TOLERANCE, run_suite
from .matching import EmptyEvaluationError, RankingRun, occluded_metrics
from .model import VARIANTS, RunConfig, variant
from .synth import SynthConfig, generate_dataset, load_dataset, save_dataset
from .train import LeakageError, ablate, evaluate, load_model, save_model, summarize, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CHECK = 5
EXIT_EMPTY = 6

RUN_FILE = "run.json"
MODEL_FILE = "model.tsdt"
EMBED_FILE = "embeddings.tsdt"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- configuration -------------------------------------------------------------

def read_toml(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {path}", EXIT_CONFIG) from exc
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"cannot parse {path}: {exc}", EXIT_CONFIG) from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def run_config(args, file_cfg: dict) -> RunConfig:
    """Defaults (full or toy profile) < config file < command-line flags."""
    file_cfg = {k: v for k, v in file_cfg.items() if k != "synth"}
    toy = bool(getattr(args, "toy", False) or file_cfg.pop("profile", "full") == "toy")
    data = (RunConfig.toy() if toy else RunConfig()).to_dict()
    data = _merge(data, file_cfg)
    for name in ("epochs", "seed", "lr", "ids_per_batch"):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if getattr(args, "check_leakage", False):
        data["check_leakage"] = True
    try:
        cfg = RunConfig.from_dict(data)
        if getattr(args, "variant", None):
            cfg = variant(cfg, args.variant)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid run configuration: {exc}", EXIT_CONFIG) from exc
    return cfg


def synth_config(args, file_cfg: dict) -> SynthConfig:
    data = dict(file_cfg.get("synth", {}))
    for f in fields(SynthConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    try:
        return SynthConfig(**data)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid synthetic-data configuration: {exc}", EXIT_CONFIG) from exc


def _load_data(path):
    try:
        return load_dataset(path)
    except (FileNotFoundError, checkpoint.CheckpointError, benchmark.ManifestError, KeyError) as exc:
        raise CliError(f"cannot load dataset from {path}: {exc}", EXIT_DATA) from exc


def _check_sizes(cfg: RunConfig, data) -> None:
    e, s = cfg.encoder, data.config
    if (e.image_h, e.image_w, e.channels) != (s.image_h, s.image_w, s.channels):
        raise CliError(f"encoder expects {e.channels}x{e.image_h}x{e.image_w} images but the dataset holds "
                       f"{s.channels}x{s.image_h}x{s.image_w}; try --toy", EXIT_CONFIG)


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = synth_config(args, read_toml(args.config))
    paths = save_dataset(generate_dataset(cfg), args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = run_config(args, read_toml(args.config))
    data = _load_data(args.data)
    _check_sizes(cfg, data)
    out = Path(args.out)
    try:
        res = train(cfg, data, out_dir=out, max_steps=args.max_steps)
    except LeakageError as exc:
        raise CliError(str(exc), EXIT_CHECK) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    save_model(res.model, out / MODEL_FILE)
    (out / RUN_FILE).write_text(json.dumps({"config": cfg.to_dict(), "num_ids": len(res.label_map)},
                                           indent=2, sort_keys=True) + "\n")
    test = data.where_split("query", "gallery")
    if len(test):
        save_embeddings(out / EMBED_FILE, res.model.embedding_set(test))
    print(json.dumps({"steps": len(res.records), "first_total": res.first("total"),
                      "last_total": res.last("total"), "out": str(out)}))
    return EXIT_OK


def _load_run(run_dir):
    run_dir = Path(run_dir)
    try:
        meta = json.loads((run_dir / RUN_FILE).read_text())
        cfg = RunConfig.from_dict(meta["config"])
        return load_model(run_dir / MODEL_FILE, cfg, meta["num_ids"])
    except (FileNotFoundError, KeyError, checkpoint.CheckpointError) as exc:
        raise CliError(f"cannot load trained run from {run_dir}: {exc}", EXIT_DATA) from exc


def _manifest_ids(path) -> list[str]:
    try:
        return [r.image_id for r in benchmark.read_manifest(path).records]
    except (FileNotFoundError, benchmark.ManifestError) as exc:
        raise CliError(f"cannot read manifest {path}: {exc}", EXIT_DATA) from exc


def cmd_eval(args) -> int:
    if args.run is not None:
        if args.data is None:
            raise CliError("--run needs --data", EXIT_USAGE)
        model = _load_run(args.run)
        try:
            report = evaluate(model, _load_data(args.data), args.split_seed, not args.include_same_camera)
        except EmptyEvaluationError as exc:
            raise CliError(str(exc), EXIT_EMPTY) from exc
        _write_json(report.to_dict(), args.out)
        return EXIT_OK
    if args.embeddings is None or args.query is None:
        raise CliError("eval needs --embeddings and --query (or --run and --data)", EXIT_USAGE)
    try:
        emb = load_embeddings(args.embeddings, args.index)
    except (FileNotFoundError, checkpoint.CheckpointError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load embeddings: {exc}", EXIT_DATA) from exc
    try:
        query = emb.select(_manifest_ids(args.query))
        gallery = emb.select(_manifest_ids(args.gallery)) if args.gallery else emb
    except KeyError as exc:
        raise CliError(f"manifest names an image missing from the embeddings: {exc}", EXIT_DATA) from exc
    try:
        run = RankingRun.from_embeddings(query, gallery, not args.include_same_camera, args.threshold)
        report = occluded_metrics(run)
    except EmptyEvaluationError as exc:
        raise CliError(str(exc), EXIT_EMPTY) from exc
    _write_json(report.to_dict(), args.out)
    return EXIT_OK


def cmd_build_benchmark(args) -> int:
    try:
        manifest = benchmark.read_manifest(args.manifest)
        split = benchmark.build(manifest, args.seed)
    except (FileNotFoundError, benchmark.ManifestError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    benchmark.save_split(split, args.out)
    rep = benchmark.validate(split)
    print(f"gallery {len(split.gallery)} images / {len({r.identity for r in split.gallery})} ids, "
          f"query {len(split.query)} images / {len({r.identity for r in split.query})} ids")
    for v in rep.violations:
        print(f"violation: {v}", file=sys.stderr)
    return EXIT_OK if rep.ok else EXIT_CHECK


def cmd_ablate(args) -> int:
    file_cfg = read_toml(args.config)
    base = run_config(args, file_cfg)
    scfg = synth_config(argparse.Namespace(), file_cfg)
    if (base.encoder.image_h, base.encoder.image_w) != (scfg.image_h, scfg.image_w):
        raise CliError("encoder image size does not match the synthetic data; try --toy", EXIT_CONFIG)
    t0 = time.perf_counter()
    rows = ablate(base, lambda s: generate_dataset(SynthConfig(**{**asdict(scfg), "seed": s})), args.seeds,
                  args.variants)
    table = summarize(rows)
    _write_json({"seeds": list(args.seeds), "seconds": time.perf_counter() - t0, "table": table}, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    def show(name, checks):
        worst = max(c.rel_error for c in checks)
        print(f"{'ok  ' if worst < args.tol else 'FAIL'} {name:<24} worst rel err {worst:.2e}")

    res = run_suite(seed=args.seed, tol=args.tol, eps=args.eps, on_case=show)
    print(f"{len(res.results)} cases, worst {res.worst:.2e}, {res.seconds:.1f}s")
    return EXIT_OK if res.passed else EXIT_CHECK


def _write_pgm(path: Path, grid: np.ndarray) -> None:
    """Binary 8-bit PGM, scaled so the grid's maximum is white."""
    top = grid.max()
    pix = np.zeros(grid.shape, dtype=np.uint8) if top <= 0 else np.round(255 * grid / top).astype(np.uint8)
    h, w = pix.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def cmd_export_attn(args) -> int:
    model = _load_run(args.run)
    if model.decoder is None:
        raise CliError("the encoder-only baseline has no part attention", EXIT_CONFIG)
    data = _load_data(args.data)
    _check_sizes(model.cfg, data)
    names = args.image_ids or data.image_ids[:args.limit]
    pos = {im: i for i, im in enumerate(data.image_ids)}
    missing = [n for n in names if n not in pos]
    if missing:
        raise CliError(f"unknown image ids: {missing}", EXIT_DATA)
    maps = model.attention_maps(data.images[[pos[n] for n in names]])
    gh, gw = model.cfg.encoder.grid
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, per_part in zip(names, maps):
        for p, row in enumerate(per_part):
            grid = row.reshape(gh, gw)
            stem = out / f"{name}_part{p}"
            np.savetxt(stem.with_suffix(".txt"), grid, fmt="%.8f")
            if args.pgm:
                _write_pgm(stem.with_suffix(".pgm"), grid)
    print(f"wrote {len(names)} x {maps.shape[1]} attention grids ({gh}x{gw}) to {out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with RunConfig fields ([encoder] and [synth] tables allowed)")
    p.add_argument("--toy", action="store_true", help="start from the small toy profile")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ids-per-batch", dest="ids_per_batch", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsdlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic occluded-pedestrian dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-ids", dest="train_ids", type=int)
    p.add_argument("--test-ids", dest="test_ids", type=int)
    p.add_argument("--images-per-id", dest="images_per_id", type=int)
    p.add_argument("--npo-rate", dest="npo_rate", type=float)
    p.add_argument("--ntp-rate", dest="ntp_rate", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on a synthetic dataset")
    p.add_argument("--data", required=True, help="directory written by `synth`")
    p.add_argument("--out", required=True)
    _run_flags(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--check-leakage", dest="check_leakage", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score embeddings on the occlusion-aware metric families")
    p.add_argument("--embeddings", help="embedding file (index .tsv alongside)")
    p.add_argument("--index")
    p.add_argument("--query", help="manifest CSV listing the query images")
    p.add_argument("--gallery", help="manifest CSV listing the gallery (default: every embedding)")
    p.add_argument("--run", help="trained run directory, evaluated on --data instead of an embedding file")
    p.add_argument("--data")
    p.add_argument("--split-seed", dest="split_seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--include-same-camera", dest="include_same_camera", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-benchmark", help="reorganise a manifest into the holistic-query benchmark")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_benchmark)

    p = sub.add_parser("ablate", help="train the baseline and M1-M4 ladder over several seeds")
    _run_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=TOLERANCE)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attn", help="write per-part student attention grids")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-ids", dest="image_ids", nargs="+")
    p.add_argument("--limit", type=int, default=4)
    p.add_argument("--pgm", action="store_true", help="also write 8-bit grayscale PGM images")
    p.set_defaults(func=cmd_export_attn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"tsdlab {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
