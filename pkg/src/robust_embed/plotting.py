"""SVG scatter plots built from ``metric=value`` report files."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class ReportError(ValueError):
    pass


@dataclass
class Report:
    label: str
    values: dict

    def has(self, *keys):
        return all(k in self.values for k in keys)


def _parse_value(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def read_report(path) -> Report:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            key, sep, val = s.partition("=")
            if not sep or not key.strip():
                raise ReportError(f"{path}:{lineno}: expected key=value, got {s!r}")
            values[key.strip()] = _parse_value(val.strip())
    if not values:
        raise ReportError(f"{path}: report is empty")
    label = values.get("label")
    return Report(str(label) if label is not None else path.parent.name or path.stem, values)


def _scatter(points, xlabel, ylabel, title, out_path, note=None):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for label, x, y in points:
        ax.scatter([x], [y], s=40)
        ax.annotate(label, (x, y), textcoords="offset points", xytext=(5, 5), fontsize=8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    if note:
        ax.text(0.02, 0.02, note, transform=ax.transAxes, fontsize=7, color="gray")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_reports(reports: list[Report], out_dir) -> list[Path]:
    """Write the alignment-uniformity and queries-vs-accuracy-reduction plots.

    A plot is only written if at least one report carries its fields.
    Raises ``ReportError`` without writing anything when no plot applies.
    """
    if not reports:
        raise ReportError("no reports given")
    au = [(r.label, r.values["uniformity"], r.values["alignment"]) for r in reports if r.has("alignment", "uniformity")]
    qa = [(r.label, r.values["mean_queries"], r.values["accuracy_reduction"])
          for r in reports if r.has("mean_queries", "accuracy_reduction")]
    if not au and not qa:
        raise ReportError("reports carry neither alignment/uniformity nor mean_queries/accuracy_reduction")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if au:
        # both axes are "lower is better", so the best models sit bottom-left
        p = out_dir / "align_uniform.svg"
        _scatter(au, "uniformity", "alignment", "alignment vs uniformity", p, note="lower-left is better")
        written.append(p)
    if qa:
        p = out_dir / "queries_accuracy.svg"
        _scatter(qa, "average queries", "accuracy reduction", "attack cost vs damage", p)
        written.append(p)
    return written
