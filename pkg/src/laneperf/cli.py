from __future__ import annotations

import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import typer
import yaml
from pydantic import ValidationError
from rich import print as rprint
from rich.panel import Panel
from rich.table import Table

from .audit import OutputIndex
from .domain import MiniDataset
from .embedder import ImageEmbedder, make_embedder
from .errors import ArtifactError, DataError, LanePerfError
from .estimators import CalibrationArtifact, load_artifact, reference_features, save_artifact
from .harness import CALIBRATED, DISPLAY_NAMES, METHODS, build_estimators, calibrate_all, run_benchmark, score_sets
from .lane_eval import f1_from_counts
from .log import configure_logging, get_logger
from .manifest import Manifest, parse_manifest
from .network import NetworkWeights, TrainConfig, gradcheck, load_weights, save_weights
from .records import load_manifest_segments
from .report import render_table, write_report
from .synth import SynthConfig, benchmark_suite, generate_corpus, load_synth_config, write_corpus

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PARTIAL = 3

WEIGHTS_FILE = "laneperf.json"

# Exception types of whichever click build typer runs on (recent typer vendors its own).
_USAGE_ERROR = next(c for c in typer.BadParameter.__mro__ if c.__name__ == "UsageError")
_CLICK_EXCEPTION = next(c for c in typer.BadParameter.__mro__ if c.__name__ == "ClickException")

app = typer.Typer(no_args_is_help=True, add_completion=False,
                  help="Label-free lane-detection performance estimation.")


@app.callback()
def _global(
        log_level: str = typer.Option("WARNING", "--log-level", envvar="LANEPERF_LOG_LEVEL",
                                      help="DEBUG | INFO | WARNING | ERROR"),
):
    configure_logging(log_level)


# ----- helpers -----

def _fail(title: str, e: Exception, code: int = EXIT_DATA) -> typer.Exit:
    rprint(Panel.fit(f"[red]{e}[/red]", title=f"❌ {title}"))
    return typer.Exit(code)


def _methods(requested: Optional[List[str]], allowed: Sequence[str] = METHODS) -> List[str]:
    if not requested:
        return list(allowed)
    bad = [m for m in requested if m not in allowed]
    if bad:
        raise typer.BadParameter(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(allowed)}",
                                 param_hint="--method")
    return [m for m in allowed if m in requested]


def _embedder_kind(kind: str) -> str:
    if kind not in ("builtin", "precomputed"):
        raise typer.BadParameter("choose builtin or precomputed", param_hint="--embedder")
    return kind


def _load_manifest(path: Path, minidataset_size: Optional[int]) -> Manifest:
    return parse_manifest(path).with_minidataset_size(minidataset_size)


def _embedder(kind: str, manifest: Manifest, image_root: Optional[Path]) -> ImageEmbedder:
    return make_embedder(kind, manifest.d_img, image_root or manifest.base_dir)


def _load_artifacts(
        artifacts_dir: Path,
        methods: Sequence[str],
        manifest: Manifest,
        embedder: ImageEmbedder,
) -> Tuple[Dict[str, CalibrationArtifact], Optional[NetworkWeights]]:
    """Load whatever exists; a present artifact with a foreign fingerprint is refused."""
    fingerprint = manifest.fingerprint()
    artifacts: Dict[str, CalibrationArtifact] = {}
    weights = None
    for m in methods:
        if m == "laneperf":
            p = artifacts_dir / WEIGHTS_FILE
            if p.is_file():
                weights = load_weights(p, fingerprint=fingerprint, d_lane=manifest.d_lane, embedder=embedder)
        elif m in CALIBRATED:
            p = artifacts_dir / f"{m}.json"
            if p.is_file():
                art = load_artifact(p, fingerprint=fingerprint)
                if art.method != m:
                    raise ArtifactError(f"{p}: holds a {art.method} artifact, expected {m}")
                artifacts[m] = art
    return artifacts, weights


def _load_train_config(path: Optional[Path], seed: int, epochs: Optional[int]) -> TrainConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as e:
            raise DataError(f"cannot read train config {path}: {e}") from e
    data["seed"] = seed
    if epochs is not None:
        data["epochs"] = epochs
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise DataError(f"train config: {'.'.join(str(x) for x in first['loc'])}: {first['msg']}") from e


def _fmt(x: float) -> str:
    return f"{x:.4f}"


# ----- commands -----

@app.command("eval", help="Ground-truth precision / recall / F1 per mini-dataset.")
def eval_cmd(
        manifest: Path = typer.Option(..., "--manifest", help="Corpus manifest YAML"),
        segment: List[str] = typer.Option(None, "--segment", help="Segment id (repeatable); default: all"),
        role: List[str] = typer.Option(None, "--role", help="Segment role filter (repeatable)"),
        minidataset_size: Optional[int] = typer.Option(None, "--minidataset-size", min=1),
):
    try:
        mf = _load_manifest(manifest, minidataset_size)
        datasets = load_manifest_segments(mf, role or ("source_train_ref", "source_val", "target"),
                                          segment_ids=segment or None)
        scored = score_sets(datasets, mf)
    except LanePerfError as e:
        raise _fail("Evaluation failed", e)

    table = Table(title=f"Lane F1 (IoU >= {mf.iou_threshold}, stroke {mf.lane_stroke_width:g}px)")
    for col in ("Mini-dataset", "Family", "Frames", "TP", "FP", "FN", "Precision", "Recall", "F1"):
        table.add_column(col, justify="left" if col in ("Mini-dataset", "Family") else "right")
    for s in scored:
        p, r, f1 = f1_from_counts(s.counts.tp, s.counts.fp, s.counts.fn)
        note = " (vacuous)" if s.vacuous else ""
        table.add_row(s.dataset.dataset_id, s.dataset.family, str(len(s.dataset.samples)),
                      str(s.counts.tp), str(s.counts.fp), str(s.counts.fn), _fmt(p), _fmt(r), _fmt(f1) + note)
    rprint(table)


@app.command(help="Fit the estimators on the labeled source validation segments.")
def calibrate(
        manifest: Path = typer.Option(..., "--manifest", help="Corpus manifest YAML"),
        method: List[str] = typer.Option(None, "--method", help="Method (repeatable); default: all"),
        seed: int = typer.Option(0, "--seed", help="Training seed"),
        out: Path = typer.Option(Path("artifacts"), "--out", "--artifacts-dir", help="Artifact directory"),
        embedder: str = typer.Option("precomputed", "--embedder", help="builtin | precomputed"),
        image_root: Optional[Path] = typer.Option(None, "--image-root", help="Base for image_ref paths"),
        train_config: Optional[Path] = typer.Option(None, "--train-config", help="TrainConfig YAML"),
        epochs: Optional[int] = typer.Option(None, "--epochs", min=1),
        minidataset_size: Optional[int] = typer.Option(None, "--minidataset-size", min=1),
):
    methods = _methods(method)
    kind = _embedder_kind(embedder)
    if methods == ["ac"]:
        rprint(Panel.fit("AC needs no calibration; nothing written.", title="ℹ️ Notice"))
        return
    try:
        mf = _load_manifest(manifest, minidataset_size)
        cfg = _load_train_config(train_config, seed, epochs)
        emb = _embedder(kind, mf, image_root)
        val_sets = load_manifest_segments(mf, ("source_val",))
        if not val_sets:
            raise DataError("manifest declares no source_val segments")
        ref_sets = load_manifest_segments(mf, ("source_train_ref",)) if "fid" in methods else []
        result = calibrate_all(val_sets, reference_features(ref_sets), emb, mf, cfg, methods)
    except LanePerfError as e:
        raise _fail("Calibration failed", e)

    fingerprint = mf.fingerprint()
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for m, artifact in result.artifacts.items():
        written.append(save_artifact(artifact, out / f"{m}.json", fingerprint))
    if result.weights is not None:
        written.append(save_weights(result.weights, out / WEIGHTS_FILE, fingerprint))
    index = OutputIndex.create(out).write()

    table = Table(title="Calibration")
    table.add_column("Method")
    table.add_column("Result")
    for m in methods:
        if m == "ac":
            table.add_row("AC", "no artifact (calibration-free)")
        elif m in result.failures:
            table.add_row(DISPLAY_NAMES[m], f"[red]failed:[/red] {result.failures[m]}")
        elif m == "laneperf":
            curve = result.weights.loss_curve
            table.add_row("LanePerf", f"{WEIGHTS_FILE} (loss {curve[0]:.4f} -> {curve[-1]:.4f})")
        else:
            table.add_row(DISPLAY_NAMES[m], f"{m}.json")
    rprint(table)
    rprint(Panel.fit(f"Artifacts: {out}\nIndex: {index}\nValidation mini-datasets: {len(val_sets)}",
                     title="🧾 Outputs"))
    if result.failures:
        raise typer.Exit(EXIT_PARTIAL)


@app.command(help="Estimate F1 of unlabeled target mini-datasets.")
def estimate(
        manifest: Path = typer.Option(..., "--manifest", help="Corpus manifest YAML"),
        artifacts_dir: Path = typer.Option(Path("artifacts"), "--artifacts-dir", help="Calibration artifacts"),
        method: List[str] = typer.Option(None, "--method", help="Method (repeatable); default: all"),
        segment: List[str] = typer.Option(None, "--segment", help="Target segment id (repeatable)"),
        embedder: str = typer.Option("precomputed", "--embedder", help="builtin | precomputed"),
        image_root: Optional[Path] = typer.Option(None, "--image-root", help="Base for image_ref paths"),
        minidataset_size: Optional[int] = typer.Option(None, "--minidataset-size", min=1),
):
    methods = _methods(method)
    kind = _embedder_kind(embedder)
    try:
        mf = _load_manifest(manifest, minidataset_size)
        emb = _embedder(kind, mf, image_root)
        artifacts, weights = _load_artifacts(artifacts_dir, methods, mf, emb)
        estimators, missing = build_estimators(methods, artifacts, weights, emb, mf.covariance_ddof)
        if missing:
            raise ArtifactError("; ".join(missing.values()) + f" (in {artifacts_dir})")
        targets: List[MiniDataset] = load_manifest_segments(mf, ("target",), segment_ids=segment or None)
        if not targets:
            raise DataError("manifest declares no target segments")
        values = {m: [estimators[m](ds) for ds in targets] for m in methods}
    except LanePerfError as e:
        raise _fail("Estimation failed", e)

    table = Table(title="Estimated F1")
    table.add_column("Mini-dataset")
    for m in methods:
        table.add_column(DISPLAY_NAMES[m], justify="right")
    for i, ds in enumerate(targets):
        table.add_row(ds.dataset_id, *[_fmt(values[m][i]) for m in methods])
    rprint(table)


@app.command(help="Score every estimator against ground truth on labeled targets.")
def benchmark(
        manifest: Path = typer.Option(..., "--manifest", help="Corpus manifest YAML"),
        artifacts_dir: Path = typer.Option(Path("artifacts"), "--artifacts-dir", help="Calibration artifacts"),
        out: Path = typer.Option(Path("report"), "--out", help="Report directory"),
        method: List[str] = typer.Option(None, "--method", help="Method (repeatable); default: all"),
        seed: Optional[int] = typer.Option(None, "--seed", help="Seed recorded in the report"),
        embedder: str = typer.Option("precomputed", "--embedder", help="builtin | precomputed"),
        image_root: Optional[Path] = typer.Option(None, "--image-root", help="Base for image_ref paths"),
        minidataset_size: Optional[int] = typer.Option(None, "--minidataset-size", min=1),
):
    methods = _methods(method)
    kind = _embedder_kind(embedder)
    try:
        mf = _load_manifest(manifest, minidataset_size)
        emb = _embedder(kind, mf, image_root)
        artifacts, weights = _load_artifacts(artifacts_dir, methods, mf, emb)
        targets = load_manifest_segments(mf, ("target",))
        report = run_benchmark(targets, artifacts, mf, methods, weights=weights, embedder=emb, seed=seed)
    except LanePerfError as e:
        raise _fail("Benchmark failed", e)

    write_report(report, out)
    index = OutputIndex.create(out).write()
    typer.echo(render_table(report))
    rprint(Panel.fit(f"Report: {out}\nIndex: {index}", title="🧾 Outputs"))
    if report.failures:
        raise typer.Exit(EXIT_PARTIAL)


@app.command(help="Generate a seeded synthetic corpus.")
def synth(
        out: Path = typer.Option(..., "--out", help="Output directory"),
        config: Optional[Path] = typer.Option(None, "--config", help="SynthConfig YAML"),
        suite: bool = typer.Option(False, "--suite", help="Benchmark suite (source + 4 severities)"),
        seed: Optional[int] = typer.Option(None, "--seed"),
        severity: Optional[float] = typer.Option(None, "--severity", min=0.0, max=1.0),
        segments: Optional[int] = typer.Option(None, "--segments", min=1),
        frames: Optional[int] = typer.Option(None, "--frames", min=1),
        render_images: bool = typer.Option(False, "--render-images", help="Also write PNG frames"),
):
    try:
        if suite:
            cfg = benchmark_suite(seed or 0, frames_per_segment=frames or 100)
        else:
            cfg = load_synth_config(config) if config else None
            overrides = {"seed": seed, "severity": severity, "n_segments": segments, "frames_per_segment": frames}
            overrides = {k: v for k, v in overrides.items() if v is not None}
            base = cfg.model_dump() if cfg else {}
            cfg = SynthConfig.model_validate({**base, **overrides})
        if render_images:
            cfg = cfg.model_copy(update={"render_images": True})
        corpus = generate_corpus(cfg)
        path = write_corpus(corpus, out)
    except (LanePerfError, ValidationError) as e:
        raise _fail("Synthesis failed", e)

    table = Table(title="Synthetic corpus")
    for col in ("Segment", "Role", "Family", "Frames", "Pred lanes"):
        table.add_column(col)
    for s in corpus.segments:
        table.add_row(s.dataset_id, s.role, s.family, str(len(s.samples)), str(s.n_pred_lanes))
    rprint(table)
    rprint(Panel.fit(f"Manifest: {path}", title="✅ Corpus written"))


@app.command("gradcheck", help="Finite-difference check of the LanePerf network gradients.")
def gradcheck_cmd(
        seed: int = typer.Option(0, "--seed"),
        draws: int = typer.Option(100, "--draws", min=1),
        tolerance: float = typer.Option(1e-4, "--tolerance"),
        corrupt_block: Optional[str] = typer.Option(None, "--corrupt-block", hidden=True),
):
    try:
        result = gradcheck(seed=seed, draws=draws, tolerance=tolerance, corrupt_block=corrupt_block)
    except ValueError as e:
        raise _fail("Gradient check", e, EXIT_USAGE)

    table = Table(title=f"Gradient check ({result.draws} draws, tolerance {result.tolerance:g})")
    table.add_column("Block")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Status")
    for block, err in result.max_rel_error.items():
        ok = err < result.tolerance
        table.add_row(block, f"{err:.3e}", "[green]pass[/green]" if ok else "[red]FAIL[/red]")
    rprint(table)
    if not result.passed:
        rprint(Panel.fit(f"Failed blocks: {', '.join(result.failed_blocks)}", title="❌ Gradient check failed"))
        raise typer.Exit(EXIT_PARTIAL)
    rprint(Panel.fit("All parameter blocks pass", title="✅ Gradient check"))


def main() -> None:
    """Console entry point: usage errors exit 1, data errors 2, partial method failures 3."""
    try:
        rv = app(standalone_mode=False)
    except _USAGE_ERROR as e:
        e.show()
        sys.exit(EXIT_USAGE)
    except _CLICK_EXCEPTION as e:
        e.show()
        sys.exit(e.exit_code)
    except typer.Abort:
        sys.exit(EXIT_USAGE)
    sys.exit(rv if isinstance(rv, int) else EXIT_OK)


if __name__ == "__main__":
    main()
