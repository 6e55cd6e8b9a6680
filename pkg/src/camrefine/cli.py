"""Command-line driver: data generation, pipeline runs, ablations, evaluation.

Run configs are JSON with three top-level sections: ``seed``, ``data``
(either a synthetic spec or an input path), and ``pipeline``. Unknown keys
are rejected before any computation so a typo cannot silently fall back to a
default. Every run writes a ``report.json`` that echoes the fully-resolved
config, making the run reproducible from its report alone.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from .clustering import save_assignment
from .embeddings import (
    EmbeddingSet,
    SyntheticSpec,
    generate_synthetic,
    load_embeddings,
    save_embeddings,
)
from .evaluation import RetrievalSplit, cmc_map, pairwise_metrics
from .pipeline import PipelineConfig, PipelineResult, load_encoder, run_pipeline, save_encoder
from .refinement import SCHEDULES, RefinementConfig

METRIC_COLUMNS = [
    "epoch", "p", "precision", "recall", "f_score", "expansion",
    "map", "rank1", "rank5", "rank10",
]


class ConfigError(ValueError):
    """A run config failed schema validation; the message names the key."""


def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _build_refinement(section: dict, default_seed: int) -> RefinementConfig:
    allowed = {"neighbor_count", "p0", "schedule", "exp_gamma", "total_epochs", "seed"}
    _require_keys(section, allowed, "pipeline.refinement")
    section = dict(section)
    section.setdefault("seed", default_seed)
    try:
        return RefinementConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pipeline.refinement: {exc}") from None


def _build_pipeline(section: dict, seed: int) -> PipelineConfig:
    allowed = {
        "intra_epochs", "inter_epochs", "intra_k", "inter_k", "linkage",
        "learning_rate", "batch_size", "temperature", "momentum",
        "encoder_dim", "refinement",
    }
    _require_keys(section, allowed, "pipeline")
    section = dict(section)
    refinement = _build_refinement(section.pop("refinement", {}), seed)
    try:
        return PipelineConfig(refinement=refinement, seed=seed, **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pipeline: {exc}") from None


def _build_synthetic(section: dict, seed: int) -> SyntheticSpec:
    allowed = {
        "num_identities", "cameras", "images_per_identity_per_camera", "dim",
        "identity_spread", "camera_shift_strength", "seed",
    }
    _require_keys(section, allowed, "data.synthetic")
    section = dict(section)
    section.setdefault("seed", seed)
    try:
        return SyntheticSpec(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data.synthetic: {exc}") from None


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Validated union of data source, pipeline settings, and output directory."""

    seed: int
    pipeline: PipelineConfig
    synthetic: Optional[SyntheticSpec] = None
    data_path: Optional[str] = None
    data_format: Optional[str] = None
    out: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        _require_keys(raw, {"seed", "data", "pipeline", "out"}, "config")
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        data = raw.get("data")
        if not isinstance(data, dict):
            raise ConfigError("data: section is required")
        _require_keys(data, {"synthetic", "path", "format"}, "data")
        synthetic = None
        data_path = data.get("path")
        if "synthetic" in data:
            if data_path is not None:
                raise ConfigError("data: give either 'synthetic' or 'path', not both")
            synthetic = _build_synthetic(data["synthetic"], seed)
        elif data_path is None:
            raise ConfigError("data: needs 'synthetic' or 'path'")
        pipeline = _build_pipeline(raw.get("pipeline", {}), seed)
        return cls(seed, pipeline, synthetic, data_path, data.get("format"), raw.get("out"))

    def load_data(self) -> EmbeddingSet:
        if self.synthetic is not None:
            return generate_synthetic(self.synthetic)
        return load_embeddings(self.data_path, self.data_format)

    def to_dict(self) -> dict:
        """Fully-resolved echo (defaults expanded) for report.json."""
        pipeline = dataclasses.asdict(self.pipeline)
        pipeline["refinement"] = dataclasses.asdict(
            self.pipeline.resolved_refinement()
        )
        data = (
            {"synthetic": dataclasses.asdict(self.synthetic)}
            if self.synthetic is not None
            else {"path": self.data_path, "format": self.data_format}
        )
        return {"seed": self.seed, "data": data, "pipeline": pipeline, "out": self.out}


def _load_config(path: str, args) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = dict(raw)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
        raw.setdefault("pipeline", {})
        # a CLI seed override rekeys every stage, including refinement draws
        if isinstance(raw["pipeline"], dict):
            raw["pipeline"].setdefault("refinement", {})
            if isinstance(raw["pipeline"]["refinement"], dict):
                raw["pipeline"]["refinement"].pop("seed", None)
    if getattr(args, "refine", None) is not None or getattr(args, "schedule", None) is not None:
        pipeline = raw.setdefault("pipeline", {})
        refinement = pipeline.setdefault("refinement", {})
        if getattr(args, "schedule", None) is not None:
            refinement["schedule"] = args.schedule
        if getattr(args, "refine", None) == "off":
            refinement["schedule"] = "none"
            refinement["p0"] = 0.0
    if getattr(args, "out", None) is not None:
        raw["out"] = args.out
    return RunConfig.from_dict(raw)


def _write_metrics_csv(path: Path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for report in reports:
            row = [str(report.epoch), repr(report.p)]
            if report.refined_quality is not None:
                quality = report.refined_quality
                row += [
                    repr(quality.pair_precision), repr(quality.pair_recall),
                    repr(quality.f_score), repr(quality.expansion),
                ]
            else:
                row += ["", "", "", ""]
            if report.retrieval is not None:
                ret = report.retrieval
                row += [
                    repr(ret.mean_ap), repr(ret.cmc_at(1)),
                    repr(ret.cmc_at(5)), repr(ret.cmc_at(10)),
                ]
            else:
                row += ["", "", "", ""]
            writer.writerow(row)


def _write_run_artifacts(out_dir: Path, result: PipelineResult) -> list[str]:
    written: list[str] = []

    def record(name: str) -> Path:
        written.append(name)
        return out_dir / name

    for cam in sorted(result.intra.locals_):
        indices, assignment = result.intra.locals_[cam]
        path = record(f"phi_cam_{cam}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "cluster"])
            for idx, lab in zip(indices, assignment.labels):
                writer.writerow([str(int(idx)), str(int(lab))])
    for epoch, assignment in enumerate(result.inter.global_assignments):
        save_assignment(assignment, record(f"global_epoch_{epoch}.csv"))
    for epoch, refined in enumerate(result.inter.refined_assignments):
        save_assignment(refined, record(f"refined_epoch_{epoch}.csv"))
    _write_metrics_csv(record("metrics.csv"), result.inter.reports)
    save_encoder(result.inter.encoder, record("encoder.enc1"))
    return written


def _write_report(out_dir: Path, payload: dict) -> None:
    with open(out_dir / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _execute_run(config: RunConfig, out_dir: Path) -> PipelineResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    try:
        dataset = config.load_data()
        result = run_pipeline(dataset, config.pipeline)
        written = _write_run_artifacts(out_dir, result)
    except Exception as exc:
        _write_report(
            out_dir,
            {
                "config": config.to_dict(),
                "status": "error",
                "error": str(exc),
                "artifacts": written,
                "partial": True,
            },
        )
        raise
    _write_report(
        out_dir,
        {
            "config": config.to_dict(),
            "status": "ok",
            "artifacts": written + ["report.json"],
            "epochs": [report.to_dict() for report in result.inter.reports],
        },
    )
    return result


def cmd_generate(args) -> int:
    spec = SyntheticSpec(
        num_identities=args.ids,
        cameras=args.cams,
        images_per_identity_per_camera=args.per,
        dim=args.dim,
        identity_spread=args.spread,
        camera_shift_strength=args.shift,
        seed=args.seed,
    )
    save_embeddings(generate_synthetic(spec), args.out, args.format)
    total = spec.num_identities * spec.cameras * spec.images_per_identity_per_camera
    print(f"wrote {args.out} (N={total})")
    return 0


def cmd_run(args) -> int:
    config = _load_config(args.config, args)
    if config.out is None:
        raise ConfigError("no output directory (set 'out' in the config or pass --out)")
    result = _execute_run(config, Path(config.out))
    last = result.inter.reports[-1]
    print(f"run complete: {len(result.inter.reports)} epochs, final p={last.p:.4f}")
    if last.retrieval is not None:
        print(f"final map={last.retrieval.mean_ap:.4f} rank1={last.retrieval.cmc_at(1):.4f}")
    return 0


def cmd_ablate_decay(args) -> int:
    base = _load_config(args.config, args)
    out_root = Path(base.out) if base.out is not None else None
    if out_root is None:
        raise ConfigError("no output directory (set 'out' in the config or pass --out)")
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for schedule in SCHEDULES:
        refinement = dataclasses.replace(
            base.pipeline.refinement, schedule=schedule, p0=1.0
        )
        config = dataclasses.replace(
            base,
            pipeline=dataclasses.replace(base.pipeline, refinement=refinement),
            out=str(out_root / schedule),
        )
        result = _execute_run(config, out_root / schedule)
        last = result.inter.reports[-1]
        rows.append(
            {
                "schedule": schedule,
                "map": last.retrieval.mean_ap if last.retrieval else "",
                "rank1": last.retrieval.cmc_at(1) if last.retrieval else "",
                "f_score": last.refined_quality.f_score if last.refined_quality else "",
            }
        )
    table = out_root / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["schedule", "map", "rank1", "f_score"])
        for row in rows:
            writer.writerow(
                [row["schedule"]]
                + [repr(v) if isinstance(v, float) else v for v in
                   (row["map"], row["rank1"], row["f_score"])]
            )
    print(f"wrote {table}")
    return 0


def cmd_eval(args) -> int:
    if args.data is not None and (args.query is not None or args.gallery is not None):
        raise ConfigError("give either --data or --query/--gallery, not both")
    if (args.query is None) != (args.gallery is None):
        raise ConfigError("--query and --gallery must be given together")
    encoder = load_encoder(args.encoder) if args.encoder else None
    lines: list[str] = []

    if args.data is not None:
        dataset = load_embeddings(args.data)
        if dataset.identities is None:
            raise ConfigError(f"{args.data}: identities are required for evaluation")
        if args.assign is not None:
            from .clustering import load_assignment

            labels = load_assignment(args.assign)
            quality = pairwise_metrics(labels, dataset.identities)
            lines += [
                f"precision={quality.pair_precision:.6f}",
                f"recall={quality.pair_recall:.6f}",
                f"f_score={quality.f_score:.6f}",
                f"expansion={quality.expansion:.6f}",
            ]
        query = gallery = dataset
    else:
        if args.query is None:
            raise ConfigError("nothing to evaluate: give --data or --query/--gallery")
        if args.assign is not None:
            raise ConfigError("--assign requires --data")
        query = load_embeddings(args.query)
        gallery = load_embeddings(args.gallery)

    result = cmc_map(RetrievalSplit(query, gallery), encoder)
    lines += [
        f"map={result.mean_ap:.6f}",
        f"rank1={result.cmc_at(1):.6f}",
        f"rank5={result.cmc_at(5):.6f}",
        f"rank10={result.cmc_at(10):.6f}",
        f"queries={result.num_queries} excluded={result.excluded_queries}",
    ]
    text = "\n".join(lines)
    print(text)
    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _limit_threads() -> None:
    """Best-effort cap on BLAS worker threads from the LF_THREADS env var."""
    raw = os.environ.get("LF_THREADS")
    if not raw:
        return
    try:
        limit = max(1, int(raw))
    except ValueError:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(limit))
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=limit)
    except Exception:
        pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camrefine",
        description="Camera-aware pseudo-label refinement on embedding vectors.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic embedding file")
    gen.add_argument("--ids", type=_positive_int, required=True, help="identity count")
    gen.add_argument("--cams", type=_positive_int, required=True, help="camera count")
    gen.add_argument("--per", type=_positive_int, required=True,
                     help="images per identity per camera")
    gen.add_argument("--dim", type=_positive_int, required=True, help="feature width")
    gen.add_argument("--spread", type=_non_negative_float, default=0.02,
                     help="within-identity noise std")
    gen.add_argument("--shift", type=_non_negative_float, default=0.5,
                     help="camera shift strength")
    gen.add_argument("--seed", type=_non_negative_int, default=0)
    gen.add_argument("--format", choices=["csv", "bin"], default="bin")
    gen.add_argument("--out", required=True, help="output file path")
    gen.set_defaults(func=cmd_generate)

    run = sub.add_parser("run", help="run both training stages from a JSON config")
    run.add_argument("--config", required=True, help="JSON run config")
    run.add_argument("--out", help="output directory (overrides the config)")
    run.add_argument("--seed", type=_non_negative_int, help="seed override")
    run.add_argument("--refine", choices=["on", "off"], help="off trains on raw global labels")
    run.add_argument("--schedule", choices=list(SCHEDULES), help="decay schedule override")
    run.set_defaults(func=cmd_run)

    abl = sub.add_parser("ablate-decay", help="run every decay schedule with a shared seed")
    abl.add_argument("--config", required=True)
    abl.add_argument("--out", help="output directory (overrides the config)")
    abl.add_argument("--seed", type=_non_negative_int, help="seed override")
    abl.set_defaults(func=cmd_ablate_decay)

    ev = sub.add_parser("eval", help="score clustering and/or retrieval quality")
    ev.add_argument("--data", help="labeled embedding file (query = gallery)")
    ev.add_argument("--query", help="labeled query embedding file")
    ev.add_argument("--gallery", help="labeled gallery embedding file")
    ev.add_argument("--assign", help="cluster assignment CSV to score against --data labels")
    ev.add_argument("--encoder", help="ENC1 encoder applied before ranking")
    ev.add_argument("--out", help="also write the metrics to this file")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
