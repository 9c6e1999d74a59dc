"""SVG charts and comparison tables built from calibration report JSON files.

The SVG is written by hand (rects, polylines and text only) so that output
bytes depend on nothing but the input reports.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .errors import SchemaError
from .harness import REPORT_SCHEMA_VERSION

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
WIDTH, HEIGHT = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 56, 130, 30, 44

REQUIRED_KEYS = ("schema_version", "kind", "model", "num_bins", "test_accuracy", "in_domain_ece", "cells", "micro_ece", "provenance")


def load_report(path) -> dict:
    """Read and validate one calibration report."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: unreadable report ({exc})") from exc
    validate_report(doc, path)
    return doc


def validate_report(doc: dict, source="report") -> None:
    if not isinstance(doc, dict):
        raise SchemaError(f"{source}: report must be a JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in doc]
    if missing:
        raise SchemaError(f"{source}: missing keys {missing}")
    if doc["schema_version"] != REPORT_SCHEMA_VERSION:
        raise SchemaError(f"{source}: schema_version {doc['schema_version']!r}, expected {REPORT_SCHEMA_VERSION}")
    if doc["kind"] != "calibration-report":
        raise SchemaError(f"{source}: kind {doc['kind']!r} is not a calibration report")
    for cell in doc["cells"]:
        for key in ("perturbation", "level", "ece", "accuracy", "bins"):
            if key not in cell:
                raise SchemaError(f"{source}: cell lacks {key!r}")
        if len(cell["bins"]) != doc["num_bins"]:
            raise SchemaError(f"{source}: cell has {len(cell['bins'])} bins, expected {doc['num_bins']}")


def config_digest(report: dict) -> str:
    """sha256 of the report's config snapshot (paths stay out of the charts)."""
    cfg = report["provenance"].get("config", {})
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _provenance(reports) -> list[dict]:
    return [{"model": r["model"], "seed": r["provenance"].get("seed"), "config_sha256": config_digest(r)} for r in reports]


# ---------------------------------------------------------------------------
# SVG primitives


def _n(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


class _Svg:
    def __init__(self, title: str, reports):
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f"<metadata>{escape(json.dumps(_provenance(reports), sort_keys=True))}</metadata>",
        ]
        self.text(WIDTH / 2, 18, title, anchor="middle", size=13)

    def text(self, x, y, s, anchor="start", size=10, **attrs):
        extra = "".join(f' {k.replace("_", "-")}="{v}"' for k, v in attrs.items())
        self.parts.append(f'<text x="{_n(x)}" y="{_n(y)}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}"{extra}>{escape(str(s))}</text>')

    def line(self, x1, y1, x2, y2, stroke="black", dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<line x1="{_n(x1)}" y1="{_n(y1)}" x2="{_n(x2)}" y2="{_n(y2)}" stroke="{stroke}"{d}/>')

    def rect(self, x, y, w, h, fill, **data):
        extra = "".join(f' data-{k.replace("_", "-")}="{v}"' for k, v in data.items())
        self.parts.append(f'<rect x="{_n(x)}" y="{_n(y)}" width="{_n(w)}" height="{_n(h)}" fill="{fill}" stroke="black" stroke-width="0.5"{extra}/>')

    def polyline(self, pts, stroke):
        p = " ".join(f"{_n(x)},{_n(y)}" for x, y in pts)
        self.parts.append(f'<polyline points="{p}" fill="none" stroke="{stroke}" stroke-width="1.5"/>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>", ""])


class _Axes:
    def __init__(self, svg: _Svg, xmax: float, ymax: float, xlabel: str, ylabel: str):
        self.svg, self.xmax, self.ymax = svg, xmax, ymax
        self.x0, self.y0 = LEFT, HEIGHT - BOTTOM
        self.w, self.h = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
        svg.line(self.x0, self.y0, self.x0 + self.w, self.y0)
        svg.line(self.x0, self.y0, self.x0, self.y0 - self.h)
        for i in range(6):
            v = ymax * i / 5
            y = self.py(v)
            svg.line(self.x0 - 3, y, self.x0, y)
            svg.text(self.x0 - 5, y + 3, f"{v:.2f}", anchor="end", size=9)
        svg.text(self.x0 + self.w / 2, HEIGHT - 8, xlabel, anchor="middle")
        svg.text(14, self.y0 - self.h / 2, ylabel, anchor="middle", transform=f"rotate(-90 14 {_n(self.y0 - self.h / 2)})")

    def px(self, v):
        return self.x0 + self.w * v / self.xmax

    def py(self, v):
        return self.y0 - self.h * min(v, self.ymax) / self.ymax

    def legend(self, entries):
        for i, (label, colour) in enumerate(entries):
            y = TOP + 12 + 14 * i
            self.svg.rect(WIDTH - RIGHT + 10, y - 8, 10, 10, colour)
            self.svg.text(WIDTH - RIGHT + 24, y + 1, label, size=9)


def _nice_max(v: float) -> float:
    for top in (0.05, 0.1, 0.2, 0.25, 0.5, 0.75, 1.0):
        if v <= top:
            return top
    return float(v)


# ---------------------------------------------------------------------------
# charts


def ece_vs_level_svg(reports: Sequence[dict]) -> str:
    """One polyline per (model, perturbation) of ECE against level."""
    svg = _Svg("ECE vs perturbation level", reports)
    series = []
    for rep in reports:
        kinds = sorted({c["perturbation"] for c in rep["cells"]})
        for kind in kinds:
            cells = sorted((c for c in rep["cells"] if c["perturbation"] == kind), key=lambda c: c["level"])
            series.append((f"{rep['model']} / {kind}", [(c["level"], c["ece"]) for c in cells]))
    ymax = _nice_max(max([e for _, pts in series for _, e in pts] + [0.05]))
    ax = _Axes(svg, 90.0, ymax, "level", "ECE")
    for lv in range(0, 100, 10):
        svg.text(ax.px(lv), ax.y0 + 14, lv, anchor="middle", size=9)
    entries = []
    for i, (label, pts) in enumerate(series):
        colour = PALETTE[i % len(PALETTE)]
        svg.polyline([(ax.px(lv), ax.py(e)) for lv, e in pts], colour)
        entries.append((label, colour))
    ax.legend(entries)
    return svg.render()


def reliability_svg(report: dict, kind: str, level: int) -> str:
    """Per-bin accuracy bars with the bin's mean confidence marked."""
    cell = next((c for c in report["cells"] if c["perturbation"] == kind and c["level"] == level), None)
    if cell is None:
        raise SchemaError(f"report for {report['model']} has no cell ({kind}, {level})")
    svg = _Svg(f"Reliability: {report['model']}, {kind} level {level}", [report])
    ax = _Axes(svg, 1.0, 1.0, "confidence", "accuracy")
    m = report["num_bins"]
    svg.line(ax.px(0), ax.py(0), ax.px(1), ax.py(1), stroke="#888888", dash="4 3")
    for b in cell["bins"]:
        lo = (b["index"] - 1) / m
        x = ax.px(lo)
        width = ax.w / m
        if b["count"]:
            acc = b["accuracy"]
            svg.rect(x, ax.py(acc), width, ax.y0 - ax.py(acc), PALETTE[0], bin=b["index"], accuracy=repr(acc), count=b["count"])
            y = ax.py(b["confidence"])
            svg.line(x, y, x + width, y, stroke=PALETTE[1])
    for i in range(0, m + 1, max(1, m // 5)):
        svg.text(ax.px(i / m), ax.y0 + 14, f"{i / m:.1f}", anchor="middle", size=9)
    ax.legend([("accuracy", PALETTE[0]), ("mean confidence", PALETTE[1])])
    return svg.render()


def micro_ece_svg(reports: Sequence[dict]) -> str:
    """Grouped bars of micro-averaged ECE per perturbation, one colour per model."""
    svg = _Svg("Micro-averaged ECE per perturbation", reports)
    kinds = sorted({k for rep in reports for k in rep["micro_ece"]})
    ymax = _nice_max(max([v for rep in reports for v in rep["micro_ece"].values()] + [0.05]))
    ax = _Axes(svg, float(max(len(kinds), 1)), ymax, "perturbation", "micro ECE")
    group = ax.w / max(len(kinds), 1)
    bar = group * 0.8 / max(len(reports), 1)
    for k, kind in enumerate(kinds):
        svg.text(ax.px(k + 0.5), ax.y0 + 14, kind, anchor="middle", size=8)
        for r, rep in enumerate(reports):
            if kind in rep["micro_ece"]:
                v = rep["micro_ece"][kind]
                svg.rect(ax.x0 + k * group + group * 0.1 + r * bar, ax.py(v), bar, ax.y0 - ax.py(v), PALETTE[r % len(PALETTE)], value=repr(v))
    ax.legend([(rep["model"], PALETTE[r % len(PALETTE)]) for r, rep in enumerate(reports)])
    return svg.render()


def comparison_csv(reports: Sequence[dict]) -> str:
    """One row per (model, perturbation) with micro-ECE and mean accuracy."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "perturbation", "micro_ece", "mean_ece", "mean_accuracy", "test_accuracy", "in_domain_ece", "seed", "config_sha256"])
    for rep in reports:
        for kind in sorted(rep["micro_ece"]):
            cells = [c for c in rep["cells"] if c["perturbation"] == kind]
            w.writerow(
                [
                    rep["model"],
                    kind,
                    f"{rep['micro_ece'][kind]:.9g}",
                    f"{sum(c['ece'] for c in cells) / len(cells):.9g}",
                    f"{sum(c['accuracy'] for c in cells) / len(cells):.9g}",
                    f"{rep['test_accuracy']:.9g}",
                    f"{rep['in_domain_ece']:.9g}",
                    rep["provenance"].get("seed", ""),
                    config_digest(rep),
                ]
            )
    return buf.getvalue()


def render_all(reports: Sequence[dict], out_dir, kind=None, level=None) -> list[Path]:
    """Write the three charts and the comparison table; returns the written paths.

    The reliability diagram uses the first report; ``kind`` defaults to its
    first perturbation and ``level`` to the highest level present.
    """
    if not reports:
        raise SchemaError("no reports given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    first = reports[0]
    kind = kind or first["cells"][0]["perturbation"]
    if level is None:
        level = max(c["level"] for c in first["cells"] if c["perturbation"] == kind)
    files = {
        "ece_vs_level.svg": ece_vs_level_svg(reports),
        "reliability.svg": reliability_svg(first, kind, int(level)),
        "micro_ece.svg": micro_ece_svg(reports),
        "comparison.csv": comparison_csv(reports),
    }
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths.append(p)
    return paths
