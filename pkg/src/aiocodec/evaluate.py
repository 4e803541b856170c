"""Rate-distortion evaluation over real compressed files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .checkpoint import atomic_write
from .degrade import DegradationSpec, apply_degradation
from .metrics import RDPoint, bd_metrics, ms_ssim, psnr
from .model import compress, decompress

__all__ = [
    "EVAL_COLUMNS",
    "DesyncError",
    "parse_degradation",
    "eval_run",
    "curves_from_rows",
    "read_eval_csv",
    "rd_report",
]

EVAL_COLUMNS = ("image", "degradation", "quality", "bytes", "bpp", "psnr", "ms_ssim", "psnr_input")

BD_VARIANT = "cubic polynomial fit in log2(bpp), exact integration over the overlap"


class DesyncError(RuntimeError):
    """Decoder-side reconstruction differs from the encoder-side one."""


_DEFAULT_PARAMS = {
    "rain": {"angle": 90.0, "length": 12.0, "density": 0.006, "brightness": 0.7},
    "snow": {"density": 0.006, "r_min": 1.0, "r_max": 2.5, "opacity": 0.8},
    "haze": {"t": 0.6, "airlight": 0.85},
}


def parse_degradation(token: str, seed: int = 0) -> Tuple[str, DegradationSpec]:
    """``clean``, ``gaussian_noise:25``, ``rain``, ``snow``, ``haze`` -> (label, spec)."""
    name, _, arg = token.partition(":")
    if name == "clean":
        return "clean", DegradationSpec("clean", {}, seed)
    if name == "gaussian_noise":
        sigma = float(arg or 25)
        return f"gaussian_noise:{sigma:g}", DegradationSpec("gaussian_noise", {"sigma": sigma}, seed)
    if name in _DEFAULT_PARAMS:
        if arg:
            raise ValueError(f"{name} takes no inline argument")
        return name, DegradationSpec(name, dict(_DEFAULT_PARAMS[name]), seed)
    raise ValueError(f"unknown degradation {token!r}")


def eval_run(model, model_hash: int, corpus: Sequence[np.ndarray],
             degradations: Sequence[Tuple[str, DegradationSpec]],
             qualities: Sequence[int], out_dir=None) -> List[dict]:
    """Compress, write, re-read and decode every (image, degradation, quality).

    Distortion is always measured against the clean image. Image ``i`` uses
    ``spec.seed + i`` so each image gets its own degradation sample.
    """
    rows = []
    for label, spec in degradations:
        for i, clean in enumerate(corpus):
            degraded, gt = apply_degradation(clean, replace(spec, seed=spec.seed + i))
            degraded = degraded.astype(np.float32)
            in_psnr = psnr(degraded, gt)
            for q in qualities:
                res = compress(model, degraded, q, model_hash)
                decoded = decompress(model, res.data, model_hash)
                if not np.array_equal(decoded, res.x_hat):
                    raise DesyncError(f"image {i}, {label}, quality {q}: decoder output differs from encoder side")
                h, w = gt.shape[1:]
                rows.append({
                    "image": i,
                    "degradation": label,
                    "quality": q,
                    "bytes": len(res.data),
                    "bpp": 8.0 * len(res.data) / (h * w),
                    "psnr": psnr(decoded, gt),
                    "ms_ssim": ms_ssim(decoded, gt),
                    "psnr_input": in_psnr,
                })
    if out_dir is not None:
        write_eval_outputs(rows, out_dir)
    return rows


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EVAL_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return buf.getvalue()


def curves_from_rows(rows) -> Dict[str, List[RDPoint]]:
    """Average per (degradation, quality) and sort each curve by bpp."""
    groups: Dict[Tuple[str, int], List[dict]] = {}
    for r in rows:
        groups.setdefault((r["degradation"], int(r["quality"])), []).append(r)
    curves: Dict[str, List[RDPoint]] = {}
    for (label, _), rs in sorted(groups.items()):
        curves.setdefault(label, []).append(RDPoint(
            float(np.mean([float(r["bpp"]) for r in rs])),
            float(np.mean([float(r["psnr"]) for r in rs])),
            float(np.mean([float(r["ms_ssim"]) for r in rs])),
        ))
    return {k: sorted(v, key=lambda p: p.bpp) for k, v in curves.items()}


def write_eval_outputs(rows, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "eval.csv", _csv_text(rows).encode())
    curves = curves_from_rows(rows)
    for label, pts in curves.items():
        safe = label.replace(":", "_")
        for metric in ("psnr_db", "ms_ssim"):
            text = "".join(f"{p.bpp!r} {getattr(p, metric)!r}\n" for p in pts)
            atomic_write(out / f"rd_{safe}_{metric}.txt", text.encode())
    report = {
        "bd_variant": BD_VARIANT,
        "curves": {k: [[p.bpp, p.psnr_db, p.ms_ssim] for p in v] for k, v in curves.items()},
    }
    atomic_write(out / "report.json", json.dumps(report, indent=2, sort_keys=True).encode())


def read_eval_csv(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def rd_report(rows_a, rows_b) -> Dict[str, Dict[str, float]]:
    """BD-PSNR and BD-rate of run B relative to run A, per shared degradation."""
    ca, cb = curves_from_rows(rows_a), curves_from_rows(rows_b)
    out = {}
    for label in sorted(set(ca) & set(cb)):
        if len(ca[label]) < 4 or len(cb[label]) < 4:
            continue
        out[label] = {
            "bd_psnr_db": bd_metrics(ca[label], cb[label], "bd_psnr"),
            "bd_rate_pct": bd_metrics(ca[label], cb[label], "bd_rate"),
        }
    return out
