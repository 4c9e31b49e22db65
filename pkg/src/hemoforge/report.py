"""Run reporting: class-count histogram, lineage-grouped confusion heatmaps,
and a plain-text summary stitched from whatever artifacts a run directory
holds. Missing artifacts leave a named gap instead of failing the report.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
from matplotlib import patches  # noqa: E402

from .confident import lineage_annotations, load_label_issues  # noqa: E402
from .manifest import Manifest  # noqa: E402
from .metrics import ConfusionMatrix  # noqa: E402
from .registry import ClassRegistry, Lineage, default_registry  # noqa: E402

_LINEAGE_COLORS = {
    Lineage.GRANULOPOIESIS: "#d95f02",
    Lineage.MONOCYTOPOIESIS: "#7570b3",
    Lineage.LYMPHOPOIESIS: "#1b9e77",
    Lineage.UNASSIGNED: "#666666",
}


def lineage_display_order(registry: ClassRegistry) -> list[int]:
    """Class indices reordered so each lineage forms a contiguous block,
    preserving registry order within a block."""
    rank = {lin: i for i, lin in enumerate(Lineage)}
    return sorted(range(len(registry)),
                  key=lambda i: (rank[registry.entries[i].lineage], i))


def plot_class_histogram(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    registry = manifest.registry
    counts = manifest.class_counts()
    order = lineage_display_order(registry)
    codes = [registry.entries[i].code for i in order]
    values = [counts[c] for c in codes]
    colors = [_LINEAGE_COLORS[registry.entries[i].lineage] for i in order]

    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(codes)), 4))
    bars = ax.bar(codes, values, color=colors)
    for bar, v in zip(bars, values):
        ax.annotate(str(v), (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    positive = [v for v in values if v > 0]
    if positive and max(positive) > 50 * min(positive):
        ax.set_yscale("log")
    ax.set_ylabel("labeled samples")
    ax.set_title("class distribution (grouped by lineage)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_confusion_heatmap(cm: ConfusionMatrix, path, normalize: bool = True,
                           title: str = "") -> Path:
    """Heatmap with classes reordered into lineage blocks and a box drawn
    around each block, so within-lineage confusion reads as on-block mass."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    registry = cm.registry
    order = lineage_display_order(registry)
    counts = cm.counts[order][:, order].astype(float)
    if normalize:
        row_sums = counts.sum(axis=1, keepdims=True)
        display = counts / row_sums.clip(min=1.0)
    else:
        display = counts
    codes = [registry.entries[i].code for i in order]

    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(display, cmap="viridis", vmin=0.0,
                   vmax=1.0 if normalize else None)
    ax.set_xticks(range(len(codes)), codes, rotation=90, fontsize=8)
    ax.set_yticks(range(len(codes)), codes, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if len(codes) <= 16:
        for i in range(len(codes)):
            for j in range(len(codes)):
                if cm.counts[order[i], order[j]]:
                    ax.text(j, i, str(int(cm.counts[order[i], order[j]])),
                            ha="center", va="center", fontsize=6, color="white")
    start = 0
    for end in range(1, len(order) + 1):
        boundary = (end == len(order)
                    or registry.entries[order[end]].lineage
                    != registry.entries[order[start]].lineage)
        if boundary:
            lineage = registry.entries[order[start]].lineage
            rect = patches.Rectangle((start - 0.5, start - 0.5), end - start,
                                     end - start, fill=False, lw=1.8,
                                     edgecolor=_LINEAGE_COLORS[lineage])
            ax.add_patch(rect)
            start = end
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title(title or "confusion matrix")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


@dataclass(frozen=True)
class ReportSummary:
    summary_path: Path
    generated: tuple[Path, ...]
    missing: tuple[str, ...]


def emit_report(run_dir, registry: ClassRegistry | None = None) -> ReportSummary:
    """Render everything found under run_dir into run_dir/report/.

    Looks for manifest.csv, oof/<group>/{report.txt,confusion.csv}, and
    issues.csv. Each absent artifact is recorded as a gap in summary.txt.
    """
    run_dir = Path(run_dir)
    registry = registry or default_registry()
    report_dir = run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    generated: list[Path] = []
    missing: list[str] = []
    lines: list[str] = [f"run report for {run_dir}", ""]

    manifest_path = run_dir / "manifest.csv"
    if manifest_path.is_file():
        manifest = Manifest.load(manifest_path, registry)
        generated.append(plot_class_histogram(manifest, report_dir / "class_histogram.png"))
        counts = manifest.class_counts()
        lines.append(f"dataset: {len(manifest)} records, "
                     f"{sum(counts.values())} labeled")
        for code in registry.codes:
            lines.append(f"  {code}: {counts[code]}")
    else:
        missing.append("manifest.csv")

    oof_root = run_dir / "oof"
    groups = sorted(p.name for p in oof_root.iterdir() if p.is_dir()) \
        if oof_root.is_dir() else []
    if not groups:
        missing.append("oof/<group>/")
    for group in groups:
        lines.append("")
        lines.append(f"out-of-fold group: {group}")
        report_txt = oof_root / group / "report.txt"
        if report_txt.is_file():
            lines.extend("  " + l for l in report_txt.read_text().splitlines())
        else:
            missing.append(f"oof/{group}/report.txt")
        cm_path = oof_root / group / "confusion.csv"
        if cm_path.is_file():
            cm = ConfusionMatrix.load(cm_path, registry)
            png = plot_confusion_heatmap(
                cm, report_dir / f"confusion_{group}.png",
                title=f"out-of-fold confusion: {group}")
            generated.append(png)
            annotations = lineage_annotations(cm, limit=10)
            if annotations:
                lines.append("  top confusions:")
                lines.extend("    " + a for a in annotations)
        else:
            missing.append(f"oof/{group}/confusion.csv")

    issues_path = run_dir / "issues.csv"
    if issues_path.is_file():
        issues = load_label_issues(issues_path)
        lines.append("")
        lines.append(f"label issues flagged: {len(issues)}")
        for it in issues[:20]:
            lines.append(f"  {it.sample_id}: given {it.given_label} -> "
                         f"suggested {it.suggested_label} "
                         f"(self-confidence {it.self_confidence:.4f})")
    else:
        missing.append("issues.csv")

    if missing:
        lines.append("")
        lines.append("missing artifacts:")
        lines.extend(f"  {m}" for m in missing)
    summary_path = report_dir / "summary.txt"
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ReportSummary(summary_path, tuple(generated), tuple(missing))
