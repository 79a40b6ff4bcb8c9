"""Search outputs: Pareto CSV, JSON history, architecture JSON, weight dumps and SVG plots."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .search_space import GENES, Genotype
from .searcher import dominates

PARETO_COLUMNS = ("key", *GENES, "measured_error", "param_count")


def write_pareto_csv(records: Sequence, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PARETO_COLUMNS)
        for r in records:
            g = r.genotype.to_dict()
            w.writerow([r.key, *(g[k] for k in GENES), repr(float(r.measured_error)), r.param_count])


def read_pareto_csv(path: str | Path) -> list[tuple[Genotype, float, int]]:
    """Parse and revalidate mutual non-domination of the rows."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PARETO_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            g = Genotype.from_dict({k: row[k] for k in GENES})
            if g.key != row["key"]:
                raise ValueError(f"{path}: key {row['key']} does not match its genes")
            rows.append((g, float(row["measured_error"]), int(row["param_count"])))
    for i, a in enumerate(rows):
        for j, b in enumerate(rows):
            if i != j and dominates(a[1:], b[1:]):
                raise ValueError(f"{path}: row {j + 1} is dominated by row {i + 1}")
    return rows


def write_jsonl(items: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- weights ------------------------------------------------------------------------------

def write_weights(state: dict[str, np.ndarray], bin_path: str | Path, manifest_path: str | Path) -> None:
    """Flat little-endian float64 dump in sorted-name order, plus a JSON shape manifest."""
    names = sorted(state)
    manifest, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name in names:
            arr = np.asarray(state[name], dtype="<f8")
            fh.write(arr.tobytes())
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    write_json({"dtype": "float64", "byteorder": "little", "count": offset, "tensors": manifest},
               manifest_path)


def read_weights(bin_path: str | Path, manifest_path: str | Path | None = None) -> dict[str, np.ndarray]:
    bin_path = Path(bin_path)
    manifest_path = Path(manifest_path) if manifest_path else bin_path.with_suffix(".json")
    meta = json.loads(manifest_path.read_text(encoding="utf-8"))
    flat = np.fromfile(bin_path, dtype="<f8")
    if flat.size != meta["count"]:
        raise ValueError(f"{bin_path}: {flat.size} values, manifest expects {meta['count']}")
    out = {}
    for t in meta["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        out[t["name"]] = flat[t["offset"]:t["offset"] + n].reshape(tuple(t["shape"])).astype(np.float64)
    return out


# --- SVG ----------------------------------------------------------------------------------

def _polyline(xs, ys, box, color: str, extra: str = "", yrange=None) -> str:
    x0, y0, w, h = box
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    xmin, xmax = xs.min(), xs.max()
    ymin, ymax = yrange if yrange is not None else (ys.min(), ys.max())
    sx = w / (xmax - xmin) if xmax > xmin else 0.0
    sy = h / (ymax - ymin) if ymax > ymin else 0.0
    pts = " ".join(f"{x0 + (x - xmin) * sx:.2f},{y0 + h - (y - ymin) * sy:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}" {extra}/>'


def _frame(title: str, xlabel: str, ylabel: str, ylo: float, yhi: float, body: list[str],
           width: int = 640, height: int = 400) -> str:
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
        f'<line x1="60" y1="{height - 50}" x2="{width - 20}" y2="{height - 50}" stroke="black"/>',
        f'<line x1="60" y1="40" x2="60" y2="{height - 50}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 15}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="15" y="{height / 2}" transform="rotate(-90 15 {height / 2})" text-anchor="middle" '
        f'font-size="12">{escape(ylabel)}</text>',
        f'<text x="55" y="{height - 50}" text-anchor="end" font-size="10">{ylo:.4g}</text>',
        f'<text x="55" y="44" text-anchor="end" font-size="10">{yhi:.4g}</text>',
        *body,
        "</svg>",
    ]) + "\n"


def convergence_svg(history: Sequence[dict], path: str | Path) -> None:
    """Best measured error per iteration; the exact values ride along in a data attribute."""
    its = [h["iteration"] for h in history if h.get("best_error") is not None]
    best = [h["best_error"] for h in history if h.get("best_error") is not None]
    body = []
    if best:
        data = " ".join(repr(float(b)) for b in best)
        body.append(_polyline(its, best, (60, 40, 560, 310), "#1f77b4",
                              f'data-iterations="{" ".join(map(str, its))}" data-best-error="{data}"'))
    lo, hi = (min(best), max(best)) if best else (0.0, 0.0)
    Path(path).write_text(_frame("Search convergence", "iteration", "best measured error (MAE)",
                                 lo, hi, body), encoding="utf-8")


def read_convergence_svg(path: str | Path) -> list[float]:
    text = Path(path).read_text(encoding="utf-8")
    marker = 'data-best-error="'
    i = text.find(marker)
    if i < 0:
        return []
    j = text.index('"', i + len(marker))
    return [float(v) for v in text[i + len(marker):j].split()]


def forecast_svg(truth: np.ndarray, forecast: np.ndarray, path: str | Path,
                 title: str = "Forecast vs ground truth") -> None:
    truth, forecast = np.asarray(truth, float), np.asarray(forecast, float)
    xs = np.arange(len(truth))
    lo = float(min(truth.min(), forecast.min())) if len(truth) else 0.0
    hi = float(max(truth.max(), forecast.max())) if len(truth) else 0.0
    body = []
    if len(truth) > 1:
        for series, color in ((truth, "#333333"), (forecast, "#d62728")):
            body.append(_polyline(xs, series, (60, 40, 560, 310), color, yrange=(lo, hi)))
        body.append('<text x="520" y="60" font-size="12" fill="#333333">truth</text>')
        body.append('<text x="520" y="76" font-size="12" fill="#d62728">forecast</text>')
    Path(path).write_text(_frame(title, "step", "PV power", lo, hi, body), encoding="utf-8")
