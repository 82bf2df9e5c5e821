"""Deterministic figures from the solver pipeline's CSV files.

Strictly a consumer: every number shown comes out of a CSV row or out of
report.json.  Nothing is re-fitted here — log-log panels stamp the slope
and R² the report already contains, digit for digit, so a figure can never
drift from the numbers it claims to illustrate.

Three kinds cover the pipeline's tables:

  ledger   series of every numeric column against the first (time/index)
  loglog   power-law data on log axes, optional declared slope guides
  spread   grouped constants, one marker line per group (first column)

Re-rendering a spec over the same inputs produces byte-identical files:
fixed SVG hash salt, no embedded dates, text kept as text.
"""

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "rotheplots"
matplotlib.rcParams["svg.fonttype"] = "none"

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


class FigureError(RuntimeError):
    """Bad inputs for a figure: missing/empty CSV or columns off-schema."""


@dataclass
class FigureSpec:
    """One figure: which tables, what kind, where to."""

    inputs: list
    kind: str                 # ledger | loglog | spread
    out: str
    xlabel: str = ""
    ylabel: str = ""
    title: str = ""
    guides: tuple = ()        # reference slopes; drawn only when declared
    report: str = None        # report.json for slope/R² annotations
    annotate: str = None      # dotted path into report entries, e.g. "A3.fit"

    def __post_init__(self):
        if self.kind not in ("ledger", "loglog", "spread"):
            raise FigureError(f"unknown figure kind {self.kind!r}")
        if isinstance(self.inputs, (str, Path)):
            self.inputs = [self.inputs]
        if not self.inputs:
            raise FigureError("spec has no input CSVs")
        self.guides = tuple(float(g) for g in self.guides)


# ----------------------------------------------------------------------
# the documented table schemas (header tuples as the pipeline writes them)
# ----------------------------------------------------------------------

NS_LEDGER = ("n", "t", "kinetic", "dissipation_increment",
             "composition_increment", "div_residual", "energy_slack")
FSI_LEDGER = ("n", "t", "E", "D_inc", "jump_u", "jump_v",
              "forcing_inc", "dee_slack", "eta_l2", "eta_h2")

_EXACT_SCHEMAS = {
    "a3_scaling.csv": [("dt", "jump_sum")],
    "squeeze_density.csv": [("h", "error")],
    "dual_shift.csv": [("n", "l", "h", "measured", "reference")],
    "ehrling.csv": [("delta", "window", "constant")],
    "ledger.csv": [NS_LEDGER, FSI_LEDGER],
}


def _check_schema(path, header):
    name = Path(path).name
    if name in _EXACT_SCHEMAS:
        allowed = _EXACT_SCHEMAS[name]
        if tuple(header) not in [tuple(a) for a in allowed]:
            exp = " or ".join(str(list(a)) for a in allowed)
            raise FigureError(
                f"schema mismatch for {name}: expected {exp}, "
                f"found {list(header)}")
        return
    if name == "shift_modulus.csv":
        ok = (len(header) >= 4 and header[0] == "h"
              and header[-2:] == ["sup", "spread"]
              and all(re.fullmatch(r"modulus_L\d+", c) for c in header[1:-2]))
        if not ok:
            raise FigureError(
                "schema mismatch for shift_modulus.csv: expected "
                "['h', 'modulus_L0'.., 'sup', 'spread'], "
                f"found {list(header)}")
        return
    if name == "displacements.csv":
        ok = (len(header) >= 2 and header[0] == "n"
              and all(re.fullmatch(r"eta_\d+", c) for c in header[1:]))
        if not ok:
            raise FigureError(
                "schema mismatch for displacements.csv: expected "
                f"['n', 'eta_0'..], found {list(header)}")
        return
    if len(header) < 2:
        raise FigureError(
            f"schema mismatch for {name}: expected at least two columns, "
            f"found {list(header)}")


def _read_table(path):
    path = Path(path)
    if not path.is_file():
        raise FigureError(f"no such CSV: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FigureError(f"empty CSV (no header): {path}")
    header, body = rows[0], rows[1:]
    _check_schema(path, header)
    if not body:
        raise FigureError(f"empty CSV (no data rows): {path}")
    try:
        data = [[float(v) for v in row] for row in body]
    except ValueError as e:
        raise FigureError(f"non-numeric cell in {path}: {e}") from e
    cols = {name: [row[i] for row in data] for i, name in enumerate(header)}
    return header, cols


def _load_annotation(spec):
    """The (slope, r2) pair the report carries for this figure, verbatim."""
    if spec.report is None or spec.annotate is None:
        return None
    path = Path(spec.report)
    if not path.is_file():
        raise FigureError(f"no such report: {path}")
    node = json.loads(path.read_text()).get("entries", {})
    for key in spec.annotate.split("."):
        if not isinstance(node, dict) or key not in node:
            raise FigureError(
                f"report has no entry {spec.annotate!r} (stopped at {key!r})")
        node = node[key]
    if not isinstance(node, dict) or "slope" not in node or "r2" not in node:
        raise FigureError(f"report entry {spec.annotate!r} is not a fit")
    if node.get("degenerate"):
        return None
    return node["slope"], node["r2"]


def annotation_text(slope, r2):
    """Exactly how a fit is stamped on a panel (tests compare literally)."""
    return f"slope = {slope!r}\nR² = {r2!r}"


# ----------------------------------------------------------------------
# renderers per kind
# ----------------------------------------------------------------------

_MAX_SERIES = 12


def _series_columns(header):
    names = list(header[1:])
    if len(names) > _MAX_SERIES:         # wide tables: thin evenly, keep ends
        idx = [round(i * (len(names) - 1) / (_MAX_SERIES - 1))
               for i in range(_MAX_SERIES)]
        names = [names[i] for i in sorted(set(idx))]
    return names


def _draw_ledger(ax, header, cols):
    x = cols[header[0]]
    xname = header[0]
    if len(header) > 1 and header[1] == "t":   # step ledgers: plot against t
        x, xname = cols["t"], "t"
    for name in _series_columns(header):
        if name == xname:
            continue
        ax.plot(x, cols[name], label=name, linewidth=1.0)
    return xname


def _draw_loglog(ax, header, cols):
    if tuple(header) == ("n", "l", "h", "measured", "reference"):
        # one decay curve per base step, plus the written reference curve
        groups = {}
        for n, h, m in zip(cols["n"], cols["h"], cols["measured"]):
            groups.setdefault(n, []).append((h, m))
        for n, pts in sorted(groups.items()):
            pts.sort()
            ax.loglog([p[0] for p in pts], [p[1] for p in pts],
                      marker="o", markersize=3, linewidth=0.8,
                      label=f"n = {int(n)}")
        ref = sorted(set(zip(cols["h"], cols["reference"])))
        ax.loglog([p[0] for p in ref], [p[1] for p in ref],
                  linestyle="--", color="black", linewidth=1.0,
                  label="reference")
        return cols["h"], cols["measured"]
    x = cols[header[0]]
    ys = []
    for name in _series_columns(header):
        ax.loglog(x, cols[name], marker="o", markersize=3,
                  linewidth=0.9, label=name)
        ys.extend(cols[name])
    return x, ys


def _draw_spread(ax, header, cols):
    key = header[0]
    groups = {}
    for row in zip(*(cols[h] for h in header)):
        groups.setdefault(row[0], []).append(row[1:])
    for g, pts in sorted(groups.items(), reverse=True):
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, marker="s", markersize=4, linewidth=1.0,
                label=f"{key} = {g:g}")
    ax.set_ylim(bottom=0.0)


def _draw_guides(ax, guides, xs, ys):
    """Dashed y = c x^s lines through the data's geometric center."""
    px = [v for v in xs if v > 0]
    py = [v for v in ys if v > 0]
    if not px or not py:
        return
    x0 = math.exp(sum(math.log(v) for v in px) / len(px))
    y0 = math.exp(sum(math.log(v) for v in py) / len(py))
    lo, hi = min(px), max(px)
    for s in guides:
        ax.loglog([lo, hi], [y0 * (lo / x0) ** s, y0 * (hi / x0) ** s],
                  linestyle=":", color="grey", linewidth=1.2,
                  label=f"slope {s:g} guide")


def render(spec: FigureSpec):
    """Render one figure; returns the output path.

    Raises FigureError (before any file is written) on missing or empty
    CSVs, off-schema columns, or unresolvable report annotations.
    """
    tables = [_read_table(p) for p in spec.inputs]
    note = _load_annotation(spec)

    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=120)
    try:
        for header, cols in tables:
            if spec.kind == "ledger":
                _draw_ledger(ax, header, cols)
            elif spec.kind == "loglog":
                xs, ys = _draw_loglog(ax, header, cols)
                if spec.guides:
                    _draw_guides(ax, spec.guides, xs, ys)
            else:
                _draw_spread(ax, header, cols)
        ax.set_xlabel(spec.xlabel)
        ax.set_ylabel(spec.ylabel)
        if spec.title:
            ax.set_title(spec.title)
        if note is not None:
            ax.text(0.03, 0.03, annotation_text(*note),
                    transform=ax.transAxes, fontsize=9,
                    verticalalignment="bottom",
                    bbox={"boxstyle": "round", "facecolor": "white",
                          "alpha": 0.8, "edgecolor": "grey"})
        handles, _ = ax.get_legend_handles_labels()
        if handles:
            ax.legend(fontsize=7, loc="best")
        ax.grid(True, which="both", linewidth=0.3, alpha=0.5)

        out = Path(spec.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        meta = {"Date": None} if out.suffix == ".svg" else {}
        fig.savefig(out, metadata=meta)
    finally:
        plt.close(fig)
    return out


# ----------------------------------------------------------------------
# default figure specs for a diagnostics output directory
# ----------------------------------------------------------------------

_BUNDLE_DEFAULTS = {
    "a3_scaling.csv": dict(
        kind="loglog", xlabel="dt", ylabel="summed squared jumps × dt",
        guides=(1.0,), annotate="A3.fit"),
    "shift_modulus.csv": dict(
        kind="loglog", xlabel="shift h", ylabel="shift modulus",
        guides=(0.5,), annotate="shift_modulus.fit"),
    "dual_shift.csv": dict(
        kind="loglog", xlabel="l·dt", ylabel="dual-norm shift distance",
        annotate="dual_shift.mean_curve_fit"),
    "squeeze_density.csv": dict(
        kind="loglog", xlabel="window h", ylabel="relative squeeze error",
        guides=(0.25,), annotate="squeeze_density.fit"),
    "ehrling.csv": dict(
        kind="spread", xlabel="window start step", ylabel="estimated constant"),
    "ledger.csv": dict(kind="ledger", xlabel="t", ylabel="per-step value"),
    "displacements.csv": dict(kind="ledger", xlabel="n", ylabel="displacement"),
}


def bundle_specs(bundle_dir, out_dir=None):
    """Default FigureSpec per known CSV under a diagnostics directory."""
    bundle = Path(bundle_dir)
    out = Path(out_dir) if out_dir is not None else bundle / "figures"
    report = bundle / "report.json"
    specs = []
    for path in sorted(bundle.glob("*.csv")) + sorted(bundle.glob("*/*.csv")):
        base = _BUNDLE_DEFAULTS.get(path.name)
        if base is None:
            continue
        kw = dict(base)
        if kw.pop("annotate", None) and report.is_file():
            kw["annotate"] = base["annotate"]
            kw["report"] = str(report)
        rel = path.relative_to(bundle).with_suffix(".svg")
        name = "_".join(rel.parts)
        specs.append(FigureSpec(inputs=[str(path)], out=str(out / name), **kw))
    return specs
