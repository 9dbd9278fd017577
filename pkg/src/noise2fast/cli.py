"""Command-line front door: denoise, add-noise, benchmark, and ablate.

Exit codes: 0 success, 1 one or more per-file failures, 2 usage/config
error.  Every run writes a JSON manifest accounting for each discovered
input exactly once (ok / skipped / error).  Manifests carry no timestamps,
so identical invocations with the same --seed produce byte-identical
outputs.  The fallback seed comes from the N2F_SEED environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import __version__, imaging, report, trainer
from .imaging import ImageData
from .rng import derive_seed

_EXTENSIONS = (".png", ".tif", ".tiff")


class UsageError(Exception):
    """Bad flag combination or unusable paths; maps to exit code 2."""


def _file_seed(base_seed: int, name: str) -> int:
    """Per-file seed keyed by the file name, stable across directory contents."""
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return derive_seed(base_seed, int.from_bytes(digest, "little"))


def _discover(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in _EXTENSIONS)
        if not files:
            raise UsageError(f"no supported images (png/tif/tiff) under {path}")
        return files
    raise UsageError(f"input path {path} does not exist")


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("N2F_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"N2F_SEED must be an integer, got {env!r}") from exc
    return 0


def _train_config(args, seed: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        loss=args.loss,
        scheme=args.scheme,
        lr=args.lr,
        patience_epochs=args.patience,
        avg_window=args.avg_window,
        max_epochs=args.max_epochs,
        seed=seed,
    )


def _config_dict(args, command: str, seed: int) -> dict:
    cfg = {
        "command": command,
        "loss": args.loss,
        "scheme": args.scheme,
        "lr": args.lr,
        "patience_epochs": args.patience,
        "avg_window": args.avg_window,
        "max_epochs": args.max_epochs,
        "seed": seed,
        "threads": args.threads,
        "input": str(args.input),
        "output": str(args.output) if args.output else None,
        "clean": str(args.clean) if args.clean else None,
        "sigma": args.sigma,
        "report": str(args.report) if args.report else None,
        "telemetry": str(args.telemetry) if args.telemetry else None,
    }
    return cfg


def _write_manifest(path: Path, config: dict, files: list[dict], aggregate: dict) -> None:
    manifest = {
        "tool": "noise2fast",
        "version": __version__,
        "config": config,
        "files": files,
        "aggregate": aggregate,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _metrics_for(clean: ImageData, noisy: ImageData, denoised: ImageData):
    """(psnr_noisy, psnr_denoised, ssim_noisy, ssim_denoised, data_range)."""
    if clean.data_range is not None:
        rng = float(clean.data_range)
    else:
        rng = float(clean.samples.max() - clean.samples.min())
        if rng <= 0:
            rng = 1.0
    p_noisy = imaging.psnr(noisy, clean, rng)
    p_den = imaging.psnr(denoised, clean, rng)
    s_noisy = _mean_ssim(noisy, clean, rng)
    s_den = _mean_ssim(denoised, clean, rng)
    return p_noisy, p_den, s_noisy, s_den, rng


def _mean_ssim(a: ImageData, b: ImageData, rng: float) -> float:
    vals = []
    for sl in range(a.n_slices):
        for ch in range(a.channels):
            vals.append(imaging.ssim(a.plane(sl, ch), b.plane(sl, ch), rng))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# per-file jobs (module-level so the process pool can pickle them)
# ---------------------------------------------------------------------------


def _denoise_job(job):
    in_path, out_path, cfg, clean_path, want_telemetry = job
    try:
        image = imaging.load_image(in_path)
        clean = imaging.load_image(clean_path) if clean_path else None
        sink = io.StringIO() if want_telemetry else None
        denoised, runs = trainer.denoise_image(image, cfg, clean=clean, telemetry=sink)
        imaging.save_image(denoised, out_path)
        record = {
            "input": str(in_path),
            "status": "ok",
            "output": str(out_path),
            "epochs": [r.epochs_run for r in runs],
            "stop_reasons": [r.stop_reason for r in runs],
            "final_val_mse": [r.val_history[-1] if r.val_history else None for r in runs],
        }
        return record, runs, (sink.getvalue() if sink else "")
    except Exception as exc:  # per-file isolation: record and continue
        return {"input": str(in_path), "status": "error", "reason": str(exc)}, [], ""


def _benchmark_job(job):
    (name, clean_path, noisy_path, sigma, cfg, out_path, scheme_needs_clean) = job
    try:
        clean = imaging.load_image(clean_path)
        if noisy_path is not None:
            noisy = imaging.load_image(noisy_path)
            if noisy.samples.shape != clean.samples.shape:
                raise ValueError(
                    f"noisy shape {noisy.samples.shape} != clean shape {clean.samples.shape}"
                )
        else:
            noisy = imaging.add_gaussian_noise(clean, sigma, cfg.seed)
        t0 = time.perf_counter()
        denoised, runs = trainer.denoise_image(
            noisy, cfg, clean=clean if scheme_needs_clean else None
        )
        seconds = time.perf_counter() - t0
        if out_path is not None:
            imaging.save_image(denoised, out_path)
        p_noisy, p_den, s_noisy, s_den, data_range = _metrics_for(clean, noisy, denoised)
        row = report.MetricRow(
            image=name,
            psnr_noisy=p_noisy,
            psnr_denoised=p_den,
            ssim_noisy=s_noisy,
            ssim_denoised=s_den,
            epochs=sum(r.epochs_run for r in runs),
            seconds=seconds,
            val_histories=[r.val_history for r in runs],
        )
        record = {
            "input": str(clean_path),
            "status": "ok",
            "psnr_noisy": p_noisy,
            "psnr_denoised": p_den,
            "ssim_noisy": s_noisy,
            "ssim_denoised": s_den,
            "psnr_data_range": data_range,
            "epochs": [r.epochs_run for r in runs],
        }
        return record, row
    except Exception as exc:
        return {"input": str(clean_path), "status": "error", "reason": str(exc)}, None


def _run_pool(jobs, worker, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [worker(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=threads, mp_context=get_context("spawn")) as pool:
        return list(pool.map(worker, jobs))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_denoise(args) -> int:
    seed = _resolve_seed(args)
    if args.output is None:
        raise UsageError("denoise requires --output")
    if args.scheme == "exact" and args.clean is None:
        raise UsageError("--scheme exact requires --clean ground truth")
    inputs = _discover(Path(args.input))
    out = Path(args.output)
    multi = len(inputs) > 1 or Path(args.input).is_dir()
    if multi:
        out.mkdir(parents=True, exist_ok=True)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)

    clean_by_name = {}
    if args.clean:
        clean_root = Path(args.clean)
        for p in inputs:
            cand = clean_root / p.name if clean_root.is_dir() else clean_root
            clean_by_name[p.name] = cand if cand.is_file() else None

    jobs = []
    for p in inputs:
        out_path = out / p.name if multi else out
        cfg = dataclasses.replace(_train_config(args, seed), seed=_file_seed(seed, p.name))
        jobs.append((p, out_path, cfg, clean_by_name.get(p.name), args.telemetry is not None))

    results = _run_pool(jobs, _denoise_job, args.threads)
    if args.telemetry:
        with open(args.telemetry, "w") as fh:
            for _, _, text in results:
                fh.write(text)

    records = [rec for rec, _, _ in results]
    n_err = sum(1 for r in records if r["status"] == "error")
    aggregate = {
        "files_ok": sum(1 for r in records if r["status"] == "ok"),
        "files_skipped": 0,
        "files_error": n_err,
    }
    manifest_path = (out if multi else out.parent) / "manifest.json"
    _write_manifest(manifest_path, _config_dict(args, "denoise", seed), records, aggregate)
    for r in records:
        print(f"{r['status']:7s} {r['input']}" + (f"  ({r['reason']})" if r["status"] == "error" else ""))
    return 1 if n_err else 0


def cmd_add_noise(args) -> int:
    seed = _resolve_seed(args)
    if args.sigma is None:
        raise UsageError("add-noise requires --sigma")
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    if args.output is None:
        raise UsageError("add-noise requires --output")
    inputs = _discover(Path(args.input))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)

    records = []
    for p in inputs:
        file_seed = _file_seed(seed, p.name)
        try:
            img = imaging.load_image(p)
            noisy = imaging.add_gaussian_noise(img, args.sigma, file_seed)
            parts = imaging.split_channels(noisy)
            if len(parts) == 1:
                out_path = out / (p.stem + ".tiff")
                imaging.save_image(parts[0], out_path)
                outputs = [str(out_path)]
            else:
                outputs = []
                for c, part in enumerate(parts):
                    out_path = out / f"{p.stem}_c{c}.tiff"
                    imaging.save_image(part, out_path)
                    outputs.append(str(out_path))
            records.append(
                {"input": str(p), "status": "ok", "outputs": outputs, "seed": file_seed}
            )
        except Exception as exc:
            records.append({"input": str(p), "status": "error", "reason": str(exc)})

    n_err = sum(1 for r in records if r["status"] == "error")
    aggregate = {
        "files_ok": len(records) - n_err,
        "files_skipped": 0,
        "files_error": n_err,
        "sigma": args.sigma,
    }
    _write_manifest(out / "manifest.json", _config_dict(args, "add-noise", seed), records, aggregate)
    return 1 if n_err else 0


def _benchmark_inputs(args, seed: int):
    """Resolve (name, clean path, noisy path or None) triples plus skips."""
    if args.sigma is not None and args.clean is not None:
        raise UsageError("give either --sigma (synthesize noise) or --clean (paired dirs), not both")
    triples, skipped = [], []
    if args.sigma is not None:
        if args.sigma < 0:
            raise UsageError("--sigma must be >= 0")
        for p in _discover(Path(args.input)):
            triples.append((p.stem, p, None))
    elif args.clean is not None:
        noisy_files = {p.stem: p for p in _discover(Path(args.input))}
        clean_files = {p.stem: p for p in _discover(Path(args.clean))}
        for stem in sorted(set(noisy_files) | set(clean_files)):
            if stem in noisy_files and stem in clean_files:
                triples.append((stem, clean_files[stem], noisy_files[stem]))
            else:
                side = "clean" if stem in noisy_files else "noisy"
                path = noisy_files.get(stem) or clean_files.get(stem)
                skipped.append(
                    {"input": str(path), "status": "skipped", "reason": f"no matching {side} file"}
                )
    else:
        raise UsageError("benchmark requires --sigma (clean inputs) or --clean (paired dirs)")
    return triples, skipped


def cmd_benchmark(args) -> int:
    seed = _resolve_seed(args)
    if args.scheme == "exact" and args.sigma is None and args.clean is None:
        raise UsageError("--scheme exact requires ground truth (--sigma or --clean)")
    triples, skipped = _benchmark_inputs(args, seed)
    report_path = Path(args.report) if args.report else Path("report.csv")
    out_dir = Path(args.output) if args.output else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for name, clean_path, noisy_path in triples:
        cfg = dataclasses.replace(_train_config(args, seed), seed=_file_seed(seed, clean_path.name))
        out_path = out_dir / (name + clean_path.suffix) if out_dir else None
        jobs.append(
            (name, clean_path, noisy_path, args.sigma, cfg, out_path, args.scheme == "exact")
        )
    results = _run_pool(jobs, _benchmark_job, args.threads)

    records = [rec for rec, _ in results] + skipped
    rows = [row for _, row in results if row is not None]
    aggregate = {
        "files_ok": len(rows),
        "files_skipped": len(skipped),
        "files_error": len(results) - len(rows),
    }
    if rows:
        agg = report.write_metrics_csv(report_path, rows)
        report.render_benchmark_figures(report_path, rows)
        aggregate.update(
            {
                "mean_psnr_noisy": agg.psnr_noisy,
                "mean_psnr_denoised": agg.psnr_denoised,
                "mean_ssim_noisy": agg.ssim_noisy,
                "mean_ssim_denoised": agg.ssim_denoised,
            }
        )
        print(
            f"mean PSNR {agg.psnr_noisy:.2f} -> {agg.psnr_denoised:.2f} dB, "
            f"mean SSIM {agg.ssim_noisy:.4f} -> {agg.ssim_denoised:.4f}, "
            f"{agg.seconds:.1f} s/image over {len(rows)} images"
        )
    manifest_path = report_path.with_name(report_path.stem + "_manifest.json")
    _write_manifest(manifest_path, _config_dict(args, "benchmark", seed), records, aggregate)
    return 1 if aggregate["files_error"] else 0


def cmd_ablate(args) -> int:
    seed = _resolve_seed(args)
    if args.sigma is None:
        raise UsageError("ablate requires --sigma (clean inputs are corrupted on the fly)")
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    inputs = _discover(Path(args.input))
    report_path = Path(args.report) if args.report else Path("ablation.csv")

    schemes = ("checkerboard", "quad", "exact")
    scheme_rows: dict[str, list] = {}
    per_input = {p.name: {"input": str(p), "status": "ok", "schemes": {}} for p in inputs}
    for scheme in schemes:
        jobs = []
        for p in inputs:
            cfg = dataclasses.replace(
                _train_config(args, seed),
                scheme=scheme,
                seed=_file_seed(seed, p.name),
            )
            jobs.append((p.stem, p, None, args.sigma, cfg, None, scheme == "exact"))
        results = _run_pool(jobs, _benchmark_job, args.threads)
        rows = [row for _, row in results if row is not None]
        for p, (rec, row) in zip(inputs, results):
            entry = dict(rec)
            entry.pop("input", None)
            per_input[p.name]["schemes"][scheme] = entry
            if row is None:
                per_input[p.name]["status"] = "error"
        if rows:
            csv_path = report_path.with_name(f"{report_path.stem}_{scheme}.csv")
            report.write_metrics_csv(csv_path, rows)
            scheme_rows[scheme] = rows

    records = [per_input[p.name] for p in inputs]
    n_err = sum(1 for r in records if r["status"] == "error")
    aggregate = {
        "files_ok": len(records) - n_err,
        "files_skipped": 0,
        "files_error": n_err,
    }
    for scheme, rows in scheme_rows.items():
        mean_psnr = sum(r.psnr_denoised for r in rows) / len(rows)
        aggregate[f"mean_psnr_{scheme}"] = mean_psnr
        print(f"{scheme:13s} mean PSNR {mean_psnr:.2f} dB over {len(rows)} images")
    if scheme_rows:
        report.render_ablation_figure(report_path, scheme_rows)
    _write_manifest(
        report_path.with_name(report_path.stem + "_manifest.json"),
        _config_dict(args, "ablate", seed),
        records,
        aggregate,
    )
    return 1 if n_err else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noise2fast",
        description="Blind single-image denoising trained on checkerboard-downsampled halves.",
    )
    parser.add_argument("--version", action="version", version=f"noise2fast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_output=True):
        p.add_argument("--input", required=True, help="input file or directory")
        p.add_argument("--output", default=None, help="output file or directory")
        p.add_argument("--seed", type=int, default=None, help="base seed (fallback: N2F_SEED, then 0)")
        p.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
        p.add_argument("--loss", choices=["bce", "mse"], default="bce")
        p.add_argument(
            "--scheme", choices=["checkerboard", "quad", "exact"], default="checkerboard"
        )
        p.add_argument("--patience", type=int, default=100, help="epochs without improvement before stopping")
        p.add_argument("--avg-window", type=int, default=100, dest="avg_window")
        p.add_argument("--max-epochs", type=int, default=20000, dest="max_epochs")
        p.add_argument("--sigma", type=float, default=None, help="Gaussian noise level (nominal scale)")
        p.add_argument("--clean", default=None, help="clean ground-truth file or directory")
        p.add_argument("--report", default=None, help="metrics CSV path")
        p.add_argument("--threads", type=int, default=1, help="parallel jobs across images")
        p.add_argument("--telemetry", default=None, help="JSONL telemetry output path")

    common(sub.add_parser("denoise", help="denoise images"))
    common(sub.add_parser("add-noise", help="write unclipped noisy float copies"))
    common(sub.add_parser("benchmark", help="denoise with ground truth and report metrics"))
    common(sub.add_parser("ablate", help="compare checkerboard/quad/exact schemes"))
    return parser


_COMMANDS = {
    "denoise": cmd_denoise,
    "add-noise": cmd_add_noise,
    "benchmark": cmd_benchmark,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
