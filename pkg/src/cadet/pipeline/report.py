"""Render evaluation reports as JSON, text tables and AR-vs-k plots."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

from ..metrics import EvalReport

FORMATS = ("json", "table", "plots")
_TAGS = ("easy", "medium", "hard")


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.4f}"


def curve_table(reports: Mapping[str, EvalReport]) -> str:
    """AR@k for seen, unseen and their harmonic mean, one block per model."""
    lines = []
    for name, rep in reports.items():
        lines.append(f"{name}")
        lines.append(f"{'k':>6}  {'Seen':>7}  {'Unseen':>7}  {'HM':>7}")
        for k, s, u, h in zip(rep.macro_seen.k_values, rep.macro_seen.recalls, rep.macro_unseen.recalls, rep.harmonic_mean.recalls):
            lines.append(f"{k:>6}  {_fmt(s):>7}  {_fmt(u):>7}  {_fmt(h):>7}")
        lines.append("")
    return "\n".join(lines)


def summary_table(reports: Mapping[str, EvalReport], difficulty: Optional[Mapping[str, str]] = None) -> str:
    """One row per model: unseen recall at the largest k (overall, then micro per class) and size buckets.

    Micro columns are labelled by difficulty tag when ``difficulty`` maps
    class names to easy / medium / hard; they are omitted when no report
    carries per-class curves.  Buckets or classes without ground truth print
    as ``n/a``.
    """
    difficulty = dict(difficulty or {})
    micro: List[str] = []
    for rep in reports.values():
        for c in rep.per_class:
            if c not in micro:
                micro.append(c)
    micro.sort(key=lambda c: (_TAGS.index(difficulty[c]) if difficulty.get(c) in _TAGS else len(_TAGS), c))
    sizes = [b for b in ("all", "small", "medium", "large") if any(b in r.per_size for r in reports.values())]
    top = max(max(r.macro_unseen.k_values) for r in reports.values()) if reports else 0

    head = ["Model", f"Unseen@{top}"] + [difficulty.get(c, c) for c in micro]
    head += [{"all": "Size-Ovr", "small": "Sml", "medium": "Med", "large": "Lrg"}[b] for b in sizes]
    rows = [head]
    for name, rep in reports.items():
        row = [name, _fmt(_at_top(rep.macro_unseen))]
        row += [_cell(rep.per_class[c]) if c in rep.per_class else "-" for c in micro]
        row += [_cell(rep.per_size[b]) if b in rep.per_size else "-" for b in sizes]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    out = []
    for j, r in enumerate(rows):
        out.append("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths))))
        if j == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def _at_top(curve) -> Optional[float]:
    return curve.recalls[-1] if curve.recalls else None


def _cell(curve) -> str:
    # an empty ground-truth set has recall 0 by convention; show it as n/a
    return "n/a" if curve.empty else _fmt(_at_top(curve))


def render_table(reports: Mapping[str, EvalReport], difficulty: Optional[Mapping[str, str]] = None) -> str:
    return summary_table(reports, difficulty) + "\n" + curve_table(reports)


def plot_reports(reports: Mapping[str, EvalReport], path, difficulty: Optional[Mapping[str, str]] = None) -> None:
    """AR-Seen, AR-Unseen and AR-HM panels, plus one panel per unseen class."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    difficulty = dict(difficulty or {})
    micro = sorted({c for r in reports.values() for c in r.per_class})
    panels = [("AR-Seen", lambda r: r.macro_seen), ("AR-Unseen", lambda r: r.macro_unseen), ("AR-HM", lambda r: r.harmonic_mean)]
    panels += [(f"{c} ({difficulty[c]})" if c in difficulty else c, lambda r, c=c: r.per_class.get(c)) for c in micro]
    cols = 3
    rows = -(-len(panels) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3.2 * rows), squeeze=False)
    for ax, (title, pick) in zip(axes.flat, panels):
        for name, rep in reports.items():
            curve = pick(rep)
            if curve is not None:
                ax.plot(curve.k_values, curve.recalls, marker="o", label=name)
        ax.set_xscale("log")
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        ax.set_xlabel("k")
        ax.grid(alpha=0.3)
    for ax in list(axes.flat)[len(panels) :]:
        ax.axis("off")
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_report(
    reports: Mapping[str, EvalReport],
    out_dir,
    formats: Sequence[str] = FORMATS,
    difficulty: Optional[Mapping[str, str]] = None,
) -> Dict[str, Path]:
    """Write the requested formats into ``out_dir``; returns the written paths.

    JSON goes to ``<model>.json`` per model, the table to ``table.txt`` and
    the figure to ``ar_curves.png``.
    """
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if "json" in formats:
        for name, rep in reports.items():
            p = out / f"{name}.json"
            p.write_text(rep.to_json())
            written[f"json:{name}"] = p
    if "table" in formats:
        p = out / "table.txt"
        p.write_text(render_table(reports, difficulty))
        written["table"] = p
    if "plots" in formats:
        p = out / "ar_curves.png"
        plot_reports(reports, p, difficulty)
        written["plots"] = p
    return written
