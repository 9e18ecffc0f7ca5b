"""
Command-line surface of the thermography toolkit.

    python run.py synth [SCENARIO] --out DIR [--seed N]
    python run.py reduce SEQ --method {raw,tsr,pct,adapter} --out DIR [--pooling P] [--labels L]
    python run.py detect IMG [IMG ...] [--backend mock|http] [--endpoint URL] [--nms]
    python run.py eval IMG PRED LABELS
    python run.py bench MANIFEST --out DIR [--config CFG]

Every command prints its result as JSON on stdout. Exit codes:
0 ok, 1 unexpected, 2 format/schema, 3 numeric, 4 transport/protocol,
5 bench failure rate above the configured budget.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.adapter import POOLINGS, AdapterFit, LatentStack, fit_adapter, save_model
from app.detect import BackendConfig, Detection, detect, nms_ensemble
from app.errors import AirtError, ConfigError
from app.heatsim import make_benchmark_suite
from app.metrics import evaluate
from app.reducers import ReductionResult, reduce_pct, reduce_raw, reduce_tsr
from app.seqcore import (
    BBox,
    RoiLabels,
    load_any_image,
    read_labels,
    read_sequence,
    write_image,
    write_pgm,
)
from config.config import (
    SCHEMA_VERSION,
    RunConfig,
    get_config,
    load_json,
    load_run_config,
    load_scenario,
)

logger = logging.getLogger(__name__)

EXIT_BENCH_FAILURES = 5
# per-method failures recorded as bench rows
ROW_ERRORS = (AirtError, ValueError, OSError, np.linalg.LinAlgError)
REDUCE_METHODS = ("raw", "tsr", "pct", "adapter")
INTERPRETATION = {
    "baseline_selection": "label-aware best case for raw frames and PCT components",
    "snr": "20*log10(|mean_d - mean_s| / sigma_s), population sigma",
    "contrast": "image shifted by -min when it has negative values",
    "standardization": "per-pixel temporal mean removed before the adapter",
    "adapter-nms metrics": "contrast and SNR on the avg-pooled image, box from the NMS ensemble",
}


def configure_logging(level: Optional[str] = None) -> None:
    level = level or get_config().LOG_LEVEL
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _write_json(doc: Any, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _export(img: np.ndarray, stem: Path) -> Dict[str, str]:
    """Full-precision sidecar plus 8-bit preview."""
    write_image(img, f"{stem}.aimg")
    write_pgm(img, f"{stem}.pgm")
    return {"aimg": f"{stem}.aimg", "pgm": f"{stem}.pgm"}


def _sibling_labels(seq_path: str) -> Optional[str]:
    path = Path(seq_path)
    candidate = path.with_name(f"{path.stem}.labels.json")
    return str(candidate) if candidate.exists() else None


# --- synth ---

def cmd_synth(scenario_path: Optional[str], out_dir: str, seed: Optional[int] = None) -> Dict[str, Any]:
    scenario = load_scenario(scenario_path)
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    entries = make_benchmark_suite(scenario.n_sequences, scenario.seed, out_dir, scenario.slab)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": scenario.seed,
        "n_sequences": scenario.n_sequences,
        "sequences": entries,
    }
    _write_json(manifest, os.path.join(out_dir, "manifest.json"))
    logger.info("wrote %d sequences to %s", len(entries), out_dir)
    return manifest


# --- reduce ---

def cmd_reduce(seq_path: str, method: str, cfg: RunConfig, out_dir: str, pooling: str = "avg",
               labels_path: Optional[str] = None) -> Dict[str, Any]:
    if method not in REDUCE_METHODS:
        raise ConfigError(f"unknown method {method!r}", "/method")
    seq = read_sequence(seq_path)
    labels_path = labels_path or _sibling_labels(seq_path)
    labels = read_labels(labels_path) if labels_path else None
    os.makedirs(out_dir, exist_ok=True)
    stem = Path(out_dir) / Path(seq_path).stem

    if method == "adapter":
        fit = fit_adapter(seq, cfg.train, cfg.arch)
        image = fit.pooled(pooling)
        base = Path(f"{stem}_adapter_{pooling}")
        outputs = {"selected": _export(image.pixels, base)}
        outputs["latents"] = [_export(z, Path(f"{stem}_latent_{i:02d}")) for i, z in enumerate(fit.stack.images)]
        save_model(fit.model, f"{stem}_adapter.avlm")
        outputs["model"] = f"{stem}_adapter.avlm"
        provenance = dict(image.provenance, loss_history=fit.history)
    else:
        if method == "raw":
            if labels is None:
                raise ConfigError("raw frame selection needs labels (--labels or a .labels.json sibling)", "/labels")
            result = reduce_raw(seq, labels)
            indices = [result.selected]
        elif method == "tsr":
            result = reduce_tsr(seq, cfg.reducers.tsr_degree)
            indices = list(range(len(result.images)))
        else:
            result = reduce_pct(seq, cfg.reducers.pct_components, labels)
            indices = list(range(len(result.images)))
        base = Path(f"{stem}_{method}")
        outputs = {"images": [_export(result.images[i], Path(f"{base}_{i:03d}")) for i in indices]}
        outputs["selected"] = _export(result.image, Path(f"{base}_selected"))
        provenance = _reduction_provenance(result)
    provenance_path = f"{base}.json"
    _write_json(provenance, provenance_path)
    outputs["provenance"] = provenance_path
    return {"sequence": seq_path, "method": method, "outputs": outputs}


def _reduction_provenance(result: ReductionResult) -> Dict[str, Any]:
    out = {"method": result.method.value, "selected": result.selected, "params": result.params}
    if result.spectrum is not None:
        out["spectrum"] = [float(s) for s in result.spectrum]
    return out


# --- detect / eval ---

def resolve_backends(cfg: RunConfig, backend: Optional[str] = None, endpoint: Optional[str] = None) -> RunConfig:
    """Apply --backend/--endpoint to the configured backends; AIRT_ENDPOINT wins over --endpoint."""
    endpoint = get_config().ENDPOINT or endpoint
    backends = cfg.backends[:1] if backend else cfg.backends
    resolved = []
    for b in backends:
        kind = backend or b.kind
        url = endpoint if endpoint and kind == "http" else b.endpoint_url
        try:
            resolved.append(replace(b, kind=kind, endpoint_url=url, name="" if backend else b.name))
        except ValueError as e:
            raise ConfigError(str(e), "/backend") from e
    return replace(cfg, backends=tuple(resolved))


def cmd_detect(img_paths: Sequence[str], backend: BackendConfig, nms: bool = False,
               iou_thresh: float = 0.5) -> Dict[str, Any]:
    images = [np.asarray(load_any_image(p), dtype=np.float64) for p in img_paths]
    if nms:
        det = nms_ensemble(LatentStack(np.stack(images)), backend, iou_thresh)
    else:
        if len(images) != 1:
            raise ConfigError("several images given without --nms", "/images")
        det = detect(images[0], backend)
    return dict(det.to_dict(), images=list(img_paths))


def cmd_eval(img_path: str, pred_path: str, labels_path: str) -> Dict[str, Any]:
    img = load_any_image(img_path)
    pred_doc = load_json(pred_path)
    if not isinstance(pred_doc, dict) or "bbox" not in pred_doc:
        raise ConfigError("prediction needs a 'bbox' field", "/bbox")
    pred = BBox.from_list(pred_doc["bbox"], "/bbox")
    return evaluate(img, pred, read_labels(labels_path)).to_dict()


# --- bench ---

def _method_image(method: str, seq, labels: RoiLabels, cfg: RunConfig, fit: Optional[AdapterFit]):
    if method == "raw":
        return reduce_raw(seq, labels).image, {}
    if method == "tsr":
        return reduce_tsr(seq, cfg.reducers.tsr_degree).image, {}
    if method == "pct":
        return reduce_pct(seq, cfg.reducers.pct_components, labels).image, {}
    pooling = "avg" if method == "adapter-nms" else method.split("-", 1)[1]
    return fit.pooled(pooling).pixels, {"pooling": pooling}


def bench_sequence(entry: Dict[str, Any], base_dir: str, cfg: RunConfig, gallery_dir: str) -> List[Dict[str, Any]]:
    """All method x backend rows for one manifest entry. Failures become rows with an error."""
    seq_id = entry["id"]
    common = {k: entry.get(k) for k in ("mode", "defect_class", "condition")}
    rows: List[Dict[str, Any]] = []

    def failed(method, backend_id, error):
        logger.warning("bench %s %s failed: %s", seq_id, method, error)
        return dict(common, sequence_id=seq_id, method=method, backend=backend_id, pooling=None,
                    metrics=None, detection=None, wall_time_s=None, detect_latency_s=None,
                    error=f"{type(error).__name__}: {error}")

    try:
        seq = read_sequence(os.path.join(base_dir, entry["sequence"]))
        labels = read_labels(os.path.join(base_dir, entry["labels"]))
    except (AirtError, OSError) as e:
        return [failed(m, b.backend_id, e) for m in cfg.bench.methods for b in cfg.backends]

    fit: Optional[AdapterFit] = None
    for method in cfg.bench.methods:
        started = time.perf_counter()
        try:
            if method.startswith("adapter") and fit is None:
                fit = fit_adapter(seq, cfg.train, cfg.arch)
            image, extra = _method_image(method, seq, labels, cfg, fit)
            write_pgm(image, os.path.join(gallery_dir, f"{seq_id}_{method}.pgm"))
            reduce_time = time.perf_counter() - started
        except ROW_ERRORS as e:
            rows.extend(failed(method, b.backend_id, e) for b in cfg.backends)
            continue
        for backend in cfg.backends:
            t0 = time.perf_counter()
            try:
                if method == "adapter-nms":
                    det: Detection = nms_ensemble(fit.stack, backend, cfg.bench.iou_thresh)
                else:
                    det = detect(image, backend)
                bundle = evaluate(image, det.box, labels)
            except ROW_ERRORS as e:
                rows.append(failed(method, backend.backend_id, e))
                continue
            rows.append(dict(
                common,
                sequence_id=seq_id,
                method=method,
                backend=backend.backend_id,
                pooling=extra.get("pooling"),
                metrics=bundle.to_dict(),
                detection=det.to_dict(),
                wall_time_s=reduce_time + time.perf_counter() - t0,
                detect_latency_s=det.latency_s,
                error=None,
            ))
    if fit is not None:
        for row in rows:
            if row["method"].startswith("adapter"):
                row["train_seconds"] = fit.provenance["train_seconds"]
                row["loss_first"] = fit.provenance["loss_first"]
                row["loss_last"] = fit.provenance["loss_last"]
    logger.info("bench %s done: %d rows", seq_id, len(rows))
    return rows


def summarize(rows: List[Dict[str, Any]]) -> Dict[str, List[Dict[str, Any]]]:
    """Means and medians per method and per (method, defect_class, condition)."""
    ok = [r for r in rows if r["error"] is None]
    if not ok:
        return {"by_method": [], "by_group": []}
    df = pd.json_normalize(ok)
    df = df.rename(columns={"metrics.contrast": "contrast", "metrics.snr_db": "snr_db",
                            "metrics.iou": "iou", "metrics.ncd": "ncd"})
    values = ["contrast", "snr_db", "iou", "ncd", "wall_time_s", "detect_latency_s"]
    df[values] = df[values].apply(pd.to_numeric, errors="coerce")

    def aggregate(keys):
        table = df.groupby(keys + ["backend"], dropna=False)[values].agg(["mean", "median"])
        table.columns = [f"{col}_{stat}" for col, stat in table.columns]
        table["n"] = df.groupby(keys + ["backend"], dropna=False).size()
        table = table.reset_index()
        return table.astype(object).where(table.notna(), None).to_dict(orient="records")

    return {"by_method": aggregate(["method"]),
            "by_group": aggregate(["method", "defect_class", "condition"])}


def cmd_bench(manifest_path: str, cfg: RunConfig, out_dir: str) -> Dict[str, Any]:
    manifest = load_json(manifest_path)
    if not isinstance(manifest, dict) or not isinstance(manifest.get("sequences"), list):
        raise ConfigError("manifest needs a 'sequences' list", "/sequences")
    for i, entry in enumerate(manifest["sequences"]):
        if not isinstance(entry, dict) or not all(isinstance(entry.get(k), str) for k in ("id", "sequence", "labels")):
            raise ConfigError("entry needs string 'id', 'sequence' and 'labels'", f"/sequences/{i}")
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    gallery_dir = os.path.join(out_dir, "gallery")
    os.makedirs(gallery_dir, exist_ok=True)

    started = time.perf_counter()
    per_sequence = Parallel(n_jobs=cfg.bench.n_jobs)(
        delayed(bench_sequence)(entry, base_dir, cfg, gallery_dir) for entry in manifest["sequences"]
    )
    rows = [row for seq_rows in per_sequence for row in seq_rows]
    n_failed = sum(1 for r in rows if r["error"] is not None)
    report = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "manifest": manifest_path,
        "config": cfg.to_dict(),
        "interpretation": INTERPRETATION,
        "n_sequences": len(manifest["sequences"]),
        "n_rows": len(rows),
        "n_failed": n_failed,
        "failure_rate": n_failed / len(rows) if rows else 0.0,
        "wall_time_s": time.perf_counter() - started,
        "rows": rows,
        "summary": summarize(rows),
    }
    _write_json(report, os.path.join(out_dir, "report.json"))
    logger.info("bench: %d rows, %d failed, report in %s", len(rows), n_failed, out_dir)
    return report


# --- argument parsing ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="airt", description="Active infrared thermography toolkit")
    parser.add_argument("--log-level", default=None, help="overrides AIRT_LOG_LEVEL")
    sub = parser.add_subparsers(dest="verb", required=True)

    def with_config(p):
        p.add_argument("--config", default=None, help="run config JSON")
        p.add_argument("--seed", type=int, default=None)

    def with_backend(p):
        p.add_argument("--backend", choices=("mock", "http"), default=None)
        p.add_argument("--endpoint", default=None, help="detection endpoint URL (AIRT_ENDPOINT wins)")

    p = sub.add_parser("synth", help="simulate a labelled benchmark suite")
    p.add_argument("scenario", nargs="?", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("reduce", help="reduce a sequence to images")
    p.add_argument("sequence")
    p.add_argument("--method", choices=REDUCE_METHODS, required=True)
    p.add_argument("--pooling", choices=POOLINGS, default="avg")
    p.add_argument("--labels", default=None)
    p.add_argument("--out", required=True)
    with_config(p)

    p = sub.add_parser("detect", help="localize the defect on one image, or an ensemble with --nms")
    p.add_argument("images", nargs="+")
    p.add_argument("--nms", action="store_true")
    p.add_argument("--out", default=None, help="also write the detection JSON here")
    with_config(p)
    with_backend(p)

    p = sub.add_parser("eval", help="metrics for an image, a predicted box and labels")
    p.add_argument("image")
    p.add_argument("prediction")
    p.add_argument("labels")
    p.add_argument("--out", default=None)

    p = sub.add_parser("bench", help="every method on every suite sequence")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    with_config(p)
    with_backend(p)
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if hasattr(args, "backend"):
        cfg = resolve_backends(cfg, args.backend, args.endpoint)
    return cfg


def run(args) -> int:
    if args.verb == "synth":
        result = cmd_synth(args.scenario, args.out, args.seed)
    elif args.verb == "reduce":
        result = cmd_reduce(args.sequence, args.method, _run_config(args), args.out, args.pooling, args.labels)
    elif args.verb == "detect":
        cfg = _run_config(args)
        result = cmd_detect(args.images, cfg.backend, args.nms, cfg.bench.iou_thresh)
    elif args.verb == "eval":
        result = cmd_eval(args.image, args.prediction, args.labels)
    else:
        cfg = _run_config(args)
        result = cmd_bench(args.manifest, cfg, args.out)
        summary = {k: result[k] for k in ("n_rows", "n_failed", "failure_rate")}
        print(json.dumps(dict(summary, report=os.path.join(args.out, "report.json")), indent=2))
        if result["failure_rate"] > cfg.bench.failure_budget:
            logger.error("%.1f%% of bench rows failed (budget %.1f%%)",
                         100 * result["failure_rate"], 100 * cfg.bench.failure_budget)
            return EXIT_BENCH_FAILURES
        return 0
    if getattr(args, "out", None) and args.verb in ("detect", "eval"):
        _write_json(result, args.out)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return run(args)
    except AirtError as e:
        logger.error("%s", e)
        return e.exit_code
    except Exception:
        logger.exception("unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
