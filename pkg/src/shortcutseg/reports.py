"""Report bundles and their on-disk rendering (CSV tables, SVG plots, index).

CSV columns per report type:

=================  ==========================================================
``band_dice.csv``  band, d_lo, d_hi, dice_mean, dice_std, n_images
``stability.csv``  video_id, t, dice_to_final
``paired.csv``     id, dice_marked, dice_clean, delta
``centroids.csv``  bin_x, bin_y, count
``sweep.csv``      step, offset_px, center_x, center_y, recall, dice
``saliency.csv``   id, marker_mean, background_mean, ratio
``history.csv``    epoch, loss, val_dice
=================  ==========================================================

Undefined values (e.g. a band without ground-truth foreground) are written as
``nan``.  Floats use Python's shortest round-trip representation, so equal
numbers always produce equal bytes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .probes import (
    BandedDiceReport,
    CentroidReport,
    PairedEvalReport,
    StabilityReport,
    SweepReport,
)
from .segnet import TrainHistory

BUNDLE_FILE = "bundle.json"
INDEX_FILE = "index.json"


@dataclass
class SaliencyReport:
    ids: list[str]
    marker_mean: list[float]
    background_mean: list[float]
    ratio: list[float]
    min_ratio: float = 2.0

    @property
    def fraction_above(self) -> float:
        return float(np.mean([r >= self.min_ratio for r in self.ratio])) if self.ratio else float("nan")

    def rows(self) -> list[dict]:
        return [{"id": i, "marker_mean": m, "background_mean": b, "ratio": r}
                for i, m, b, r in zip(self.ids, self.marker_mean, self.background_mean, self.ratio)]

    def to_dict(self) -> dict:
        return {"n_images": len(self.ids), "median_ratio": float(np.median(self.ratio)) if self.ratio else None,
                "min_ratio": self.min_ratio, "fraction_above": self.fraction_above}


@dataclass
class ReportBundle:
    """Everything one experiment produced, keyed by model name then probe name."""

    kind: str
    config: dict
    histories: dict[str, TrainHistory] = field(default_factory=dict)
    reports: dict[str, dict[str, object]] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False, compare=False)   # in-memory only

    def __getstate__(self):
        state = dict(self.__dict__)
        state["models"] = {}
        return state

    def add(self, model: str, probe: str, report) -> None:
        self.reports.setdefault(model, {})[probe] = report

    def get(self, model: str, probe: str):
        return self.reports[model][probe]

    def to_dict(self, include_timings: bool = True) -> dict:
        out = {
            "kind": self.kind,
            "config": self.config,
            "histories": {k: {"loss": h.loss, "val_dice": h.val_dice} for k, h in self.histories.items()},
            "reports": {m: {p: _report_dict(r) for p, r in probes.items()} for m, probes in self.reports.items()},
            "checkpoints": self.checkpoints,
            "summary": self.summary,
        }
        if include_timings:
            out["timings"] = self.timings
        return _clean(out)


def _report_dict(report) -> object:
    if isinstance(report, list):
        if report and isinstance(report[0], StabilityReport):
            return {"endpoints": [r.endpoint for r in report]}
        return [_report_dict(r) for r in report]
    return report.to_dict() if hasattr(report, "to_dict") else report


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ----------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


BAND_COLUMNS = ["band", "d_lo", "d_hi", "dice_mean", "dice_std", "n_images"]
STABILITY_COLUMNS = ["video_id", "t", "dice_to_final"]
PAIRED_COLUMNS = ["id", "dice_marked", "dice_clean", "delta"]
CENTROID_COLUMNS = ["bin_x", "bin_y", "count"]
SWEEP_COLUMNS = ["step", "offset_px", "center_x", "center_y", "recall", "dice"]
SALIENCY_COLUMNS = ["id", "marker_mean", "background_mean", "ratio"]
HISTORY_COLUMNS = ["epoch", "loss", "val_dice"]


def stability_rows(reports: list[StabilityReport]) -> list[dict]:
    return [{"video_id": r.video_id, "t": t, "dice_to_final": v} for r in reports for t, v in enumerate(r.curve)]


def history_rows(history: TrainHistory) -> list[dict]:
    return [{"epoch": e, "loss": l, "val_dice": v} for e, (l, v) in enumerate(zip(history.loss, history.val_dice))]


# ----------------------------------------------------------------------------
# SVG (presentation only)

_W, _H, _PAD = 420, 260, 40


def _svg(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{_W}" height="{_H}" fill="white"/>',
                      f'<text x="{_W / 2}" y="16" text-anchor="middle" font-size="13">{_esc(title)}</text>',
                      *body, "</svg>", ""])


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _axes(ylabel: str, xlabel: str) -> list[str]:
    x0, y0, x1, y1 = _PAD, _H - _PAD, _W - 10, 26
    out = [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
           f'<text x="{(x0 + x1) / 2}" y="{_H - 8}" text-anchor="middle">{_esc(xlabel)}</text>',
           f'<text x="12" y="{(y0 + y1) / 2}" transform="rotate(-90 12 {(y0 + y1) / 2})" '
           f'text-anchor="middle">{_esc(ylabel)}</text>']
    for v in (0.0, 0.5, 1.0):
        y = _ypos(v)
        out.append(f'<text x="{x0 - 4}" y="{y + 4:.1f}" text-anchor="end">{v:g}</text>')
    return out


def _ypos(v: float) -> float:
    return (_H - _PAD) - v * (_H - _PAD - 26)


def bar_chart_svg(values: list[float], labels: list[str], title: str, ylabel: str = "Dice") -> str:
    body = _axes(ylabel, "band (0 = center)")
    n = max(len(values), 1)
    slot = (_W - 10 - _PAD) / n
    for i, (v, lab) in enumerate(zip(values, labels)):
        x = _PAD + i * slot + slot * 0.15
        cx = _PAD + (i + 0.5) * slot
        body.append(f'<text x="{cx:.1f}" y="{_H - _PAD + 14}" text-anchor="middle">{_esc(lab)}</text>')
        if v is None or not math.isfinite(v):
            body.append(f'<text x="{cx:.1f}" y="{_ypos(0.05):.1f}" text-anchor="middle">n/a</text>')
            continue
        top = _ypos(max(0.0, min(1.0, v)))
        body.append(f'<rect x="{x:.1f}" y="{top:.1f}" width="{slot * 0.7:.1f}" '
                    f'height="{_H - _PAD - top:.1f}" fill="steelblue"/>')
    return _svg(body, title)


def line_chart_svg(series: dict[str, list[float]], title: str, xlabel: str, ylabel: str) -> str:
    body = _axes(ylabel, xlabel)
    colors = ["steelblue", "darkorange", "seagreen", "crimson", "purple", "gray"]
    longest = max((len(v) for v in series.values()), default=1)
    span = max(longest - 1, 1)
    for k, (name, vals) in enumerate(series.items()):
        pts = [f"{_PAD + i / span * (_W - 10 - _PAD):.1f},{_ypos(max(0.0, min(1.0, v))):.1f}"
               for i, v in enumerate(vals) if v is not None and math.isfinite(v)]
        color = colors[k % len(colors)]
        if pts:
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        body.append(f'<text x="{_W - 14}" y="{36 + 13 * k}" text-anchor="end" fill="{color}">{_esc(name)}</text>')
    return _svg(body, title)


def heatmap_svg(hist: np.ndarray, title: str) -> str:
    bins = hist.shape[0]
    size = min(_W, _H) - 50
    cell = size / bins
    x0, y0 = (_W - size) / 2, 26
    top = max(int(hist.max()), 1)
    body = []
    for y in range(bins):
        for x in range(bins):
            shade = 255 - int(round(255 * hist[y, x] / top))
            body.append(f'<rect x="{x0 + x * cell:.2f}" y="{y0 + y * cell:.2f}" width="{cell:.2f}" '
                        f'height="{cell:.2f}" fill="rgb({shade},{shade},255)"/>')
    q0, q1 = x0 + size * 0.25, size * 0.5
    body.append(f'<rect x="{q0:.2f}" y="{y0 + size * 0.25:.2f}" width="{q1:.2f}" height="{q1:.2f}" '
                f'fill="none" stroke="red" stroke-dasharray="4 2"/>')
    return _svg(body, title)


# ----------------------------------------------------------------------------
# rendering


def _render_one(name: str, report) -> dict[str, str]:
    """Map file name -> text for one probe report."""
    if isinstance(report, BandedDiceReport):
        labels = [str(b) for b in range(report.spec.n_bands)]
        return {"band_dice.csv": csv_text(report.rows(), BAND_COLUMNS),
                "band_dice.svg": bar_chart_svg(report.band_mean, labels, "Dice per distance band")}
    if isinstance(report, list) and report and isinstance(report[0], StabilityReport):
        series = {r.video_id: r.curve for r in report[:6]}
        return {"stability.csv": csv_text(stability_rows(report), STABILITY_COLUMNS),
                "stability.svg": line_chart_svg(series, "Agreement with final frame", "frame", "Dice")}
    if isinstance(report, PairedEvalReport):
        return {"paired.csv": csv_text(report.rows(), PAIRED_COLUMNS)}
    if isinstance(report, CentroidReport):
        return {"centroids.csv": csv_text(report.rows(), CENTROID_COLUMNS),
                "centroids.svg": heatmap_svg(report.histogram, "Mask centroid distribution")}
    if isinstance(report, SweepReport):
        return {"sweep.csv": csv_text(report.rows(), SWEEP_COLUMNS),
                "sweep.svg": line_chart_svg({"recall": report.recall, "dice": report.dice},
                                            "Lesion moved toward the border", "step", "score")}
    if isinstance(report, SaliencyReport):
        return {"saliency.csv": csv_text(report.rows(), SALIENCY_COLUMNS)}
    raise TypeError(f"cannot render report {name!r} of type {type(report).__name__}")


def render_files(bundle: ReportBundle) -> dict[str, str]:
    """All artifacts as relative path -> text, without touching the disk."""
    files: dict[str, str] = {}
    for model, history in sorted(bundle.histories.items()):
        files[f"{model}/history.csv"] = csv_text(history_rows(history), HISTORY_COLUMNS)
        files[f"{model}/history.svg"] = line_chart_svg({"loss": history.loss, "val Dice": history.val_dice},
                                                       f"{model} training", "epoch", "value")
    for model, probes in sorted(bundle.reports.items()):
        for probe, report in sorted(probes.items()):
            for fname, text in _render_one(probe, report).items():
                files[f"{model}/{fname}"] = text
    files[BUNDLE_FILE] = json.dumps(bundle.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"
    return files


def render_reports(bundle: ReportBundle, out_dir) -> list[Path]:
    """Write every CSV/SVG plus ``bundle.json`` and an ``index.json`` listing them."""
    out_dir = Path(out_dir)
    files = render_files(bundle)
    written = []
    for rel, text in files.items():
        path = out_dir / rel
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"{path}: cannot write report ({exc.strerror or exc})") from exc
        written.append(path)
    index = {"kind": bundle.kind, "artifacts": sorted(files)}
    index_path = out_dir / INDEX_FILE
    index_path.write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    written.append(index_path)
    return written


def load_bundle_dict(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / BUNDLE_FILE
    return json.loads(path.read_text(encoding="utf-8"))
