"""Gnuplot scripts for the CSV bundles written by the experiments.

Nothing here renders images; each script reads CSV files that sit next to it
and can be run with ``gnuplot <script>`` to produce a PNG.
"""

from __future__ import annotations

from pathlib import Path

PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666")

_HEADER = """set datafile separator ','
set terminal pngcairo size {w},{h} enhanced font 'Sans,10'
set output '{png}'
set key {key}
set grid lc rgb '#dddddd'
"""


def _header(png: str, key: str = "top right", w: int = 800, h: int = 500) -> str:
    return _HEADER.format(w=w, h=h, png=png, key=key)


def _esc(text: str) -> str:
    return text.replace("'", "''")


def line_plot(png: str, series, xcol: int, ycol: int, xlabel: str, ylabel: str, title: str = "",
              logx: bool = False) -> str:
    """Script plotting ``ycol`` against ``xcol`` for each ``(csv_file, label)`` in ``series``."""
    out = [_header(png), f"set xlabel '{_esc(xlabel)}'", f"set ylabel '{_esc(ylabel)}'"]
    if title:
        out.append(f"set title '{_esc(title)}'")
    if logx:
        out.append("set logscale x")
    parts = []
    for i, (path, label) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        parts.append(f"'{_esc(str(path))}' every ::1 using {xcol}:{ycol} with lines lw 2 lc rgb '{color}' "
                     f"title '{_esc(label)}'")
    out.append("plot " + ", \\\n     ".join(parts))
    return "\n".join(out) + "\n"


def scatter_plot(png: str, csv_file: str, xcol: int, ycols, labels, xlabel: str, ylabel: str,
                 title: str = "") -> str:
    out = [_header(png), f"set xlabel '{_esc(xlabel)}'", f"set ylabel '{_esc(ylabel)}'"]
    if title:
        out.append(f"set title '{_esc(title)}'")
    parts = [f"'{_esc(csv_file)}' every ::1 using {xcol}:{y} with linespoints pt 7 ps 0.8 lc rgb "
             f"'{PALETTE[i % len(PALETTE)]}' title '{_esc(lab)}'" for i, (y, lab) in enumerate(zip(ycols, labels))]
    out.append("plot " + ", \\\n     ".join(parts))
    return "\n".join(out) + "\n"


def cdf_plot(png: str, csv_file: str, ycols, labels, xlabel: str, title: str = "") -> str:
    """Empirical CDFs of columns of one CSV via gnuplot's ``smooth cnormal``."""
    out = [_header(png, key="bottom right"), f"set xlabel '{_esc(xlabel)}'", "set ylabel 'CDF'",
           "set yrange [0:1]"]
    if title:
        out.append(f"set title '{_esc(title)}'")
    parts = [f"'{_esc(csv_file)}' every ::1 using {y}:(1) smooth cnormal with lines lw 2 lc rgb "
             f"'{PALETTE[i % len(PALETTE)]}' title '{_esc(lab)}'" for i, (y, lab) in enumerate(zip(ycols, labels))]
    out.append("plot " + ", \\\n     ".join(parts))
    return "\n".join(out) + "\n"


def write_script(directory, name: str, text: str) -> Path:
    path = Path(directory) / name
    path.write_text(text)
    return path
