"""Static SVG bar charts for before/after filtration histograms."""
from __future__ import annotations

from xml.sax.saxutils import escape

from .cohort_filter import ClassHistogram

WIDTH, HEIGHT = 640, 360
MARGIN = 50


def histogram_svg(hist: ClassHistogram, title: str | None = None) -> str:
    """Grey bars for all rows, blue bars for rows kept after filtration."""
    n = len(hist.count_all)
    peak = max(int(hist.count_all.max()), 1)
    plot_w = WIDTH - 2 * MARGIN
    plot_h = HEIGHT - 2 * MARGIN
    bar_w = plot_w / n
    title = title or f"class {hist.class_id}: normalized volume"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="{MARGIN / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{escape(title)}</text>',
    ]
    for series, colour in ((hist.count_all, "#b0b0b0"), (hist.count_kept, "#3b6fb6")):
        for i, count in enumerate(series):
            if count == 0:
                continue
            h = plot_h * int(count) / peak
            x = MARGIN + i * bar_w
            y = MARGIN + plot_h - h
            out.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w * 0.9:.2f}" '
                f'height="{h:.2f}" fill="{colour}"/>'
            )
    base = MARGIN + plot_h
    out.append(f'<line x1="{MARGIN}" y1="{base}" x2="{WIDTH - MARGIN}" y2="{base}" stroke="black"/>')
    out.append(f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{base}" stroke="black"/>')
    for x, value, anchor in (
        (MARGIN, hist.edges[0], "start"),
        (WIDTH - MARGIN, hist.edges[-1], "end"),
    ):
        out.append(
            f'<text x="{x}" y="{base + 18}" text-anchor="{anchor}" font-family="sans-serif" '
            f'font-size="11">{value:.4g}</text>'
        )
    out.append(
        f'<text x="{MARGIN - 6}" y="{MARGIN + 4}" text-anchor="end" font-family="sans-serif" '
        f'font-size="11">{peak}</text>'
    )
    legend_y = HEIGHT - 12
    out.append(f'<rect x="{MARGIN}" y="{legend_y - 9}" width="10" height="10" fill="#b0b0b0"/>')
    out.append(f'<text x="{MARGIN + 14}" y="{legend_y}" font-family="sans-serif" font-size="11">all</text>')
    out.append(f'<rect x="{MARGIN + 50}" y="{legend_y - 9}" width="10" height="10" fill="#3b6fb6"/>')
    out.append(f'<text x="{MARGIN + 64}" y="{legend_y}" font-family="sans-serif" font-size="11">kept</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
