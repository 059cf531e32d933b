"""Command-line surface: run, bench, export and selftest."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Final, Sequence

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

from hisop.alignment import PatternAffinity
from hisop.compose import SemanticVoxelGrid
from hisop.pipeline import RunArtifacts, RunReport, run_pipeline
from utils.common import ArgumentError, HisopError
from utils.config import (
    BENCH_CONFIG_NAME,
    DEFAULT_CONFIG_NAME,
    RunConfig,
    default_config_path,
    load_config,
    resolve_output_dir,
    with_ablations,
    with_run_overrides,
)
from utils.formats import (
    CSV_FLOAT_FORMAT,
    affinity_to_gray,
    encode_pgm,
    read_voxel_grid,
    write_metrics_csv,
    write_voxel_grid,
)

PREDICTION_FILE: Final[str] = "prediction.hisopvox"
GROUND_TRUTH_FILE: Final[str] = "ground_truth.hisopvox"
METRICS_FILE: Final[str] = "metrics.csv"
CONFIG_FILE: Final[str] = "config.cfg"
BENCH_FILE: Final[str] = "bench.csv"
BENCH_MARGINS_FILE: Final[str] = "bench_margins.csv"
BENCH_SUMMARY_FILE: Final[str] = "bench_summary.html"

DEFAULT_BENCH_SEEDS: Final[int] = 10
ALIGNED: Final[str] = "aligned"

#bench variants as ablation assignments over the configured run
BENCH_VARIANTS: Final[dict[str, tuple[str, ...]]] = {
    ALIGNED: (),
    "pose_shuffle": ("pose_shuffle=on",),
    "no_cpa_adr": ("cpa=off", "adr=off"),
    "geometric_only": ("temporal=off",),
    "stack": ("warp=off",),
    "cost_volume": ("cost_volume_mode=on",),
}
MARGIN_BASELINES: Final[tuple[str, ...]] = ("pose_shuffle", "no_cpa_adr")


#exports
def export_voxel_grid(grid: SemanticVoxelGrid | np.ndarray, path: Path) -> int:
    """Write a label or value grid as HISOPVOX; returns the bytes written."""
    values = grid.labels if isinstance(grid, SemanticVoxelGrid) else grid
    try:
        return write_voxel_grid(values, path)
    except OSError as exc:
        raise OSError(f"Cannot write voxel grid to {path}: {exc}") from exc


def export_heatmap(aff: PatternAffinity, group: int, depth_slice: int, path: Path) -> int:
    """Write one affinity slice as an 8-bit PGM, mapping [-1, 1] to [0, 255].

    Raises:
        ArgumentError: If the group or slice index is out of range
    """
    groups, depth = aff.values.shape[:2]
    if not 0 <= group < groups:
        raise ArgumentError(f"Heatmap group {group} out of range [0, {groups})")
    if not 0 <= depth_slice < depth:
        raise ArgumentError(f"Heatmap depth slice {depth_slice} out of range [0, {depth})")
    data = encode_pgm(affinity_to_gray(aff.values[group, depth_slice]))
    Path(path).write_bytes(data)
    return len(data)


def report_metrics(reports: Sequence[RunReport], path: Path, record_timing: bool = False) -> pd.DataFrame:
    """One CSV row per run in submission order with six-decimal floats.

    Raises:
        ArgumentError: If reports is empty
    """
    if not reports:
        raise ArgumentError("report_metrics needs at least one run report")
    return write_metrics_csv([r.to_row(record_timing) for r in reports], path)


#commands
def _load(args: argparse.Namespace, default_name: str = DEFAULT_CONFIG_NAME) -> RunConfig:
    config = load_config(args.config) if args.config else load_config(default_config_path(default_name))
    config = with_run_overrides(config, seed=args.seed, out=args.out, threads=args.threads)
    return with_ablations(config, args.ablate or [])


def _heatmap_slice(config: RunConfig, artifacts: RunArtifacts) -> int:
    """Configured slice, or the hypothesis nearest the median hit depth when negative."""
    if config.export.heatmap_slice >= 0:
        return config.export.heatmap_slice
    depth = artifacts.current_depth
    hits = depth[depth > 0] if depth is not None else np.empty(0)
    if hits.size == 0:
        return artifacts.hypotheses.count // 2
    return artifacts.hypotheses.nearest_index(float(np.median(hits)))


def write_run_outputs(config: RunConfig, artifacts: RunArtifacts, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if config.export.grids:
        export_voxel_grid(artifacts.prediction, out_dir / PREDICTION_FILE)
        export_voxel_grid(artifacts.ground_truth, out_dir / GROUND_TRUTH_FILE)
        written += [out_dir / PREDICTION_FILE, out_dir / GROUND_TRUTH_FILE]
    report_metrics([artifacts.report], out_dir / METRICS_FILE, config.run.record_timing)
    written.append(out_dir / METRICS_FILE)
    if config.export.heatmaps and artifacts.affinity is not None:
        group = config.export.heatmap_group
        depth_slice = _heatmap_slice(config, artifacts)
        for prefix, aff in (("affinity", artifacts.affinity), ("affinity_plain", artifacts.plain_affinity)):
            if aff is None:
                continue
            path = out_dir / f"{prefix}_g{group}_d{depth_slice}.pgm"
            export_heatmap(aff, group, depth_slice, path)
            written.append(path)
    (out_dir / CONFIG_FILE).write_text(config.to_text(), encoding="utf-8")
    written.append(out_dir / CONFIG_FILE)
    return written


def cmd_run(args: argparse.Namespace) -> int:
    config = _load(args)
    out_dir = resolve_output_dir(config, args.out)
    artifacts = run_pipeline(config, run_id=f"seed{config.run.seed}")
    report = artifacts.report
    print(f"Run seed {config.run.seed}: mIoU={report.miou:.4f} IoU={report.iou:.4f} "
          f"L_depth={report.l_depth:.4f} L_ce={report.l_ce:.4f} dropped={report.dropped}")
    for path in write_run_outputs(config, artifacts, out_dir):
        print(f"Wrote {path}")
    return 0


def run_bench(config: RunConfig, seeds: Sequence[int]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Every bench variant for every seed; returns (runs, margins) tables."""
    rows = []
    for seed in seeds:
        seeded = with_run_overrides(config, seed=seed)
        for variant, assignments in BENCH_VARIANTS.items():
            variant_config = with_ablations(seeded, assignments)
            report = run_pipeline(variant_config, run_id=f"{variant}_s{seed}").report
            row = report.to_row(config.run.record_timing)
            rows.append({"variant": variant, "seed": seed, **row})
    runs = pd.DataFrame(rows)
    pivot = runs.pivot(index="seed", columns="variant", values="miou")
    margins = pd.DataFrame({"seed": pivot.index})
    for baseline in MARGIN_BASELINES:
        margins[f"{ALIGNED}_minus_{baseline}"] = (pivot[ALIGNED] - pivot[baseline]).to_numpy()
    return runs, margins


def bench_figure(runs: pd.DataFrame) -> go.Figure:
    summary = runs.groupby("variant", sort=False, as_index=False)["miou"].mean()
    fig = px.bar(
        summary,
        x="variant",
        y="miou",
        title="Mean mIoU per pipeline variant",
        labels={"variant": "Variant", "miou": "mIoU"},
    )
    fig.update_layout(height=480)
    return fig


def cmd_bench(args: argparse.Namespace) -> int:
    config = _load(args, BENCH_CONFIG_NAME)
    out_dir = resolve_output_dir(config, args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [config.run.seed + i for i in range(args.seeds)]
    runs, margins = run_bench(config, seeds)
    runs.to_csv(out_dir / BENCH_FILE, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    margins.to_csv(out_dir / BENCH_MARGINS_FILE, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    bench_figure(runs).write_html(out_dir / BENCH_SUMMARY_FILE, include_plotlyjs="cdn")
    print(runs.groupby("variant", sort=False)[["miou", "iou"]].mean().to_string())
    for name in (BENCH_FILE, BENCH_MARGINS_FILE, BENCH_SUMMARY_FILE):
        print(f"Wrote {out_dir / name}")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    values = read_voxel_grid(args.input)
    print(f"Read {args.input} with extents {values.shape}")
    out = Path(args.output)
    if args.format == "csv":
        xs, ys, zs = np.indices(values.shape).reshape(3, -1)
        df = pd.DataFrame({"x": xs, "y": ys, "z": zs, "value": values.reshape(-1)})
        if args.nonzero:
            df = df[df["value"] != 0]
        df.to_csv(out, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    else:
        if not 0 <= args.slice < values.shape[2]:
            raise ArgumentError(f"Slice {args.slice} out of range [0, {values.shape[2]})")
        layer = values[:, :, args.slice].astype(np.float64)
        peak = float(np.abs(layer).max()) or 1.0
        gray = np.rint(np.clip(layer / peak, 0.0, 1.0) * 255.0).astype(np.uint8)
        out.write_bytes(encode_pgm(gray))
    print(f"Wrote {out}")
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    from hisop.selftest import run_selftest

    _, failed = run_selftest(threads=args.threads or 1)
    return 0 if failed == 0 else 1


#parsing
def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Run config (default: configs/default.cfg)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="Output directory (HISOP_OUT overrides)")
    parser.add_argument("--ablate", action="append", metavar="NAME=off", help="Toggle an ablation flag; repeatable")
    parser.add_argument("--threads", type=int)


def _parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="hisop",
        description="Hierarchical temporal context alignment for semantic occupancy on synthetic scenes.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run the pipeline once and write its artifacts")
    _add_run_options(run)
    run.set_defaults(handler=cmd_run)

    bench = commands.add_parser("bench", help="Run the ablation variants over several seeds")
    _add_run_options(bench)
    bench.add_argument("--seeds", type=int, default=DEFAULT_BENCH_SEEDS)
    bench.set_defaults(handler=cmd_bench)

    export = commands.add_parser("export", help="Convert a HISOPVOX grid to CSV or a PGM slice")
    export.add_argument("input", type=Path)
    export.add_argument("output", type=Path)
    export.add_argument("--format", choices=("csv", "pgm"), default="csv")
    export.add_argument("--slice", type=int, default=0, help="z slice for PGM output")
    export.add_argument("--nonzero", action="store_true", help="CSV: keep only nonzero voxels")
    export.set_defaults(handler=cmd_export)

    selftest = commands.add_parser("selftest", help="Run the acceptance checks")
    selftest.add_argument("--threads", type=int)
    selftest.set_defaults(handler=cmd_selftest)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    args = _parse_args(argv)
    try:
        return args.handler(args)
    except (HisopError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
