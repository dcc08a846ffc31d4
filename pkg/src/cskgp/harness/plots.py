"""Plot data as CSV, with a small self-contained SVG rendering of each."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from ..errors import IoError, ValidationError
from ..inference.model import hyper_trace
from ..spectrogram import SpectrogramGrid, spectrogram_grid
from .checkpoint import TrainedModel
from .data import atomic_write_text, format_table, standardize_inputs

KINDS = ("Spectrogram", "HyperTraces", "Predictions")
W, H, PAD = 640, 400, 48


def _check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.size == 0:
        raise IoError("refusing to emit plot data for an empty grid")
    return g


# --- computations -----------------------------------------------------------------


def model_spectrogram(model: TrainedModel, x_grid) -> SpectrogramGrid:
    """Spectrogram of the point-estimate kernel, in original input units."""
    x_grid = _check_grid(x_grid).ravel()
    if model.layout.input_dim != 1:
        raise ValidationError("spectrogram grids need a 1-d input space")
    sx = float(model.stats.x_std[0])
    xs = standardize_inputs(model.stats, x_grid[:, None])[:, 0]
    g = spectrogram_grid(model.kernel_spec(), xs)
    # frequencies per original unit; the density rescales to keep column integrals
    return SpectrogramGrid(x_grid, g.omega / sx, g.values * sx, g.amp_total)


def hyper_traces(model: TrainedModel, x_grid) -> dict:
    """Per-sample hyperfunction curves over ``x_grid`` in original units.

    Returns ``{name: (S, N) array}`` for each component-0, dimension-0
    hyperfunction, with frequencies in cycles per original unit and
    lengthscales in original units.  The point-estimate curve is under
    ``"<name>_point"``.
    """
    x_grid = _check_grid(x_grid)
    X = x_grid.reshape(-1, model.layout.input_dim) if x_grid.ndim == 1 else x_grid
    Xs = standardize_inputs(model.stats, X)
    sx = float(model.stats.x_std[0])
    if model.kind == "dsvi":
        from ..inference.dsvi import sample_states
        import jax

        states = sample_states(model.vstate, 20, jax.random.PRNGKey(0))
        pairs = [(model.hypers, s) for s in states]
    else:
        pairs = [(s["hypers"], s["state"]) for s in model.samples]
    point = hyper_trace(model.layout, model.hypers, model.point_state(), Xs)

    def unit(name, a):
        if name == "frequency":
            return a[:, 0, 0] / sx
        if name == "lengthscale":
            return a[:, 0, 0] * sx
        return a[:, 0] * model.stats.y_std

    out = {}
    traces = [hyper_trace(model.layout, h, s, Xs) for h, s in pairs]
    for name in point:
        out[name] = np.stack([unit(name, t[name]) for t in traces])
        out[name + "_point"] = unit(name, point[name])
    return out


# --- SVG ------------------------------------------------------------------------------


def _scale(v, lo, hi, a, b):
    if hi <= lo:
        return np.full_like(np.asarray(v, float), 0.5 * (a + b))
    return a + (np.asarray(v, float) - lo) / (hi - lo) * (b - a)


def _frame(title: str, x_lo, x_hi, y_lo, y_hi) -> list:
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{W / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
             f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="black"/>']
    for val, x in ((x_lo, PAD), (x_hi, W - PAD)):
        parts.append(f'<text x="{x}" y="{H - PAD + 16}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{val:.3g}</text>')
    for val, y in ((y_lo, H - PAD), (y_hi, PAD)):
        parts.append(f'<text x="{PAD - 4}" y="{y + 4}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="11">{val:.3g}</text>')
    return parts


def _polyline(xs, ys, colour, width=1.5, opacity=1.0) -> str:
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
    return (f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="{width}" '
            f'stroke-opacity="{opacity}"/>')


def heatmap_svg(x, omega, values, title: str = "spectrogram") -> str:
    x, omega, values = np.asarray(x), np.asarray(omega), np.asarray(values)
    parts = _frame(title, x.min(), x.max(), omega.min(), omega.max())
    vmax = float(np.max(values)) or 1.0
    nx, nw = len(x), len(omega)
    cw = (W - 2 * PAD) / nx
    ch = (H - 2 * PAD) / nw
    # downsample tall grids so the file stays small
    step = max(1, nw // 200)
    for i in range(nx):
        for k in range(0, nw, step):
            v = float(values[k:k + step, i].max()) / vmax
            if v < 1e-3:
                continue
            shade = int(255 * (1.0 - v))
            y = H - PAD - (k + step) * ch
            parts.append(f'<rect x="{PAD + i * cw:.2f}" y="{y:.2f}" width="{cw + 0.3:.2f}" '
                         f'height="{ch * step + 0.3:.2f}" fill="rgb({shade},{shade},255)"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def lines_svg(x, curves, point=None, band=None, title: str = "") -> str:
    """Thin lines for ``curves`` (S, N), a thick red ``point`` curve, an optional (lo, hi) band."""
    x = np.asarray(x, float)
    stack = [np.atleast_2d(curves)] if curves is not None and np.size(curves) else []
    if point is not None:
        stack.append(np.atleast_2d(point))
    if band is not None:
        stack.extend(np.atleast_2d(b) for b in band)
    allv = np.concatenate([s.ravel() for s in stack]) if stack else np.zeros(1)
    y_lo, y_hi = float(np.min(allv)), float(np.max(allv))
    parts = _frame(title, x.min(), x.max(), y_lo, y_hi)
    sx = _scale(x, x.min(), x.max(), PAD, W - PAD)

    def sy(v):
        return _scale(v, y_lo, y_hi, H - PAD, PAD)

    if band is not None:
        lo, hi = (np.asarray(b, float) for b in band)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(np.r_[sx, sx[::-1]], np.r_[sy(lo), sy(hi)[::-1]]))
        parts.append(f'<polygon points="{pts}" fill="steelblue" fill-opacity="0.25" stroke="none"/>')
    if stack and curves is not None and np.size(curves):
        for c in np.atleast_2d(curves):
            parts.append(_polyline(sx, sy(c), "steelblue", 1.0, 0.5))
    if point is not None:
        parts.append(_polyline(sx, sy(point), "red", 2.0))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- emission ---------------------------------------------------------------------------


def _paths(path) -> tuple:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".csv", ".svg") else path
    return base.with_suffix(".csv"), base.with_suffix(".svg")


def emit_plot_data(kind: str, model: TrainedModel, grid, path, predictions=None,
                   svg: bool = True) -> list:
    """Write ``<path>.csv`` and (optionally) ``<path>.svg``; returns the written paths.

    ``predictions`` for the Predictions kind is ``(x, mean, variance)`` with
    optional fourth element ``y``; otherwise predictions are computed here.
    """
    if kind not in KINDS:
        raise ValidationError(f"unknown plot kind {kind!r}; expected one of {KINDS}")
    grid = _check_grid(grid)
    csv_path, svg_path = _paths(path)
    if kind == "Spectrogram":
        g = model_spectrogram(model, grid)
        atomic_write_text(csv_path, format_table(["x", "omega", "value"], g.triples()))
        text = heatmap_svg(g.x, g.omega, g.values, "spectrogram")
    elif kind == "HyperTraces":
        tr = hyper_traces(model, grid)
        x = grid.reshape(len(grid), -1)[:, 0]
        header, cols = ["x"], [x]
        names = sorted(k for k in tr if not k.endswith("_point"))
        for name in names:
            header.append(f"{name}_point")
            cols.append(tr[name + "_point"])
            for s in range(tr[name].shape[0]):
                header.append(f"{name}_s{s}")
                cols.append(tr[name][s])
        atomic_write_text(csv_path, format_table(header, np.column_stack(cols)))
        main = "frequency" if "frequency" in tr else "lengthscale"
        text = lines_svg(x, tr[main], tr[main + "_point"], title=main)
    else:
        if predictions is None:
            from .experiment import predict_original_units

            res = predict_original_units(model, grid.reshape(len(grid), -1))
            predictions = (grid.reshape(len(grid), -1)[:, 0], res["mean"], res["variance"])
        x, mean, var = (np.asarray(a, float) for a in predictions[:3])
        order = np.argsort(x)
        sd = np.sqrt(var)
        rows = np.column_stack([x, mean, var])
        atomic_write_text(csv_path, format_table(["x", "mean", "variance"], rows))
        text = lines_svg(x[order], None, mean[order],
                         band=(mean[order] - 2 * sd[order], mean[order] + 2 * sd[order]),
                         title="predictive mean and 2 sd band")
    written = [csv_path]
    if svg:
        atomic_write_text(svg_path, text)
        written.append(svg_path)
    return written
