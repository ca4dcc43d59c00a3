"""Hand-rolled SVG renderers for training artifacts.

Everything here builds plain SVG text from report objects: loss curves,
per-fold metric bars, and confusion-matrix heatmaps. Output is a pure
function of the input values, so rerendering the same report produces
byte-identical files (diffable in tests, no drawing library involved).
"""

from pathlib import Path

from .metrics import ConfusionMatrix, MetricsReport
from .train import TrainRunReport

# one color per fold, cycled; chosen for contrast on white
_PALETTE = ("#1f6fb2", "#d1495b", "#2e8b57", "#b8860b", "#6a4fa3",
            "#1b9e9e", "#c0567a", "#557a2e")

_BAR_METRICS = ("accuracy", "precision", "recall", "f1", "iou")


def _fmt(x: float) -> str:
    """Fixed two-decimal coordinate formatting keeps files small and stable."""
    return f"{x:.2f}"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _document(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}" '
            f'font-family="sans-serif">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>',
                      *body, "</svg>"]) + "\n"


def _text(x: float, y: float, s: str, size: int = 11, anchor: str = "start",
          fill: str = "#333") -> str:
    return (f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
            f'text-anchor="{anchor}" fill="{fill}">{_esc(s)}</text>')


def render_loss_curves(report: TrainRunReport, title: str = "Training loss") -> str:
    """Per-fold train (solid) and validation (dashed) loss against epoch."""
    width, height = 640, 400
    left, right, top, bottom = 56, 20, 40, 44
    plot_w = width - left - right
    plot_h = height - top - bottom

    all_losses = [v for f in report.folds for v in f.train_losses + f.val_losses]
    if not all_losses:
        raise ValueError("render_loss_curves: report contains no epoch losses")
    max_epochs = max(len(f.train_losses) for f in report.folds)
    y_max = max(max(all_losses), 1e-12) * 1.05

    def px(epoch: int) -> float:
        if max_epochs == 1:
            return left + plot_w / 2
        return left + plot_w * epoch / (max_epochs - 1)

    def py(loss: float) -> float:
        return top + plot_h * (1.0 - loss / y_max)

    body = [_text(width / 2, 22, title, size=14, anchor="middle")]
    body.append(f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" '
                f'fill="none" stroke="#999"/>')
    body.append(_text(left - 6, py(0.0) + 4, "0", anchor="end"))
    body.append(_text(left - 6, py(y_max) + 4, f"{y_max:.3g}", anchor="end"))
    body.append(_text(left, height - 12, "1"))
    body.append(_text(left + plot_w, height - 12, str(max_epochs), anchor="end"))
    body.append(_text(width / 2, height - 12, "epoch", anchor="middle"))

    for i, fold in enumerate(report.folds):
        color = _PALETTE[i % len(_PALETTE)]
        for series, dash in ((fold.train_losses, ""), (fold.val_losses, ' stroke-dasharray="5 3"')):
            if not series:
                continue
            pts = " ".join(f"{_fmt(px(e))},{_fmt(py(v))}" for e, v in enumerate(series))
            body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                        f'stroke-width="1.5"{dash}/>')
        ly = top + 14 + 14 * i
        body.append(f'<line x1="{left + plot_w - 120}" y1="{_fmt(ly - 4)}" '
                    f'x2="{left + plot_w - 96}" y2="{_fmt(ly - 4)}" '
                    f'stroke="{color}" stroke-width="1.5"/>')
        body.append(_text(left + plot_w - 90, ly, f"fold {fold.fold}", size=10))
    body.append(_text(left + 6, top + 14, "solid: train, dashed: val", size=10, fill="#777"))
    return _document(width, height, body)


def render_metric_bars(report: TrainRunReport, title: str = "Per-fold metrics") -> str:
    """Grouped bars: one group per fold, one bar per ratio metric in [0, 1]."""
    n_folds = len(report.folds)
    if n_folds == 0:
        raise ValueError("render_metric_bars: report contains no folds")
    group_w = 18 * len(_BAR_METRICS) + 22
    left, right, top, bottom = 56, 20, 40, 56
    width = left + right + group_w * n_folds
    height = 360
    plot_h = height - top - bottom

    def py(value: float) -> float:
        return top + plot_h * (1.0 - value)

    body = [_text(width / 2, 22, title, size=14, anchor="middle")]
    for frac in (0.0, 0.5, 1.0):
        y = py(frac)
        body.append(f'<line x1="{left}" y1="{_fmt(y)}" x2="{width - right}" '
                    f'y2="{_fmt(y)}" stroke="#ddd"/>')
        body.append(_text(left - 6, y + 4, f"{frac:.1f}", anchor="end"))

    for i, fold in enumerate(report.folds):
        gx = left + group_w * i + 11
        for j, name in enumerate(_BAR_METRICS):
            value = getattr(fold.report, name)
            x = gx + 18 * j
            y = py(value)
            body.append(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="14" '
                        f'height="{_fmt(py(0.0) - y)}" '
                        f'fill="{_PALETTE[j % len(_PALETTE)]}"/>')
        body.append(_text(gx + 9 * len(_BAR_METRICS), height - 36,
                          f"fold {fold.fold}", anchor="middle", size=10))

    lx = left
    for j, name in enumerate(_BAR_METRICS):
        body.append(f'<rect x="{_fmt(lx)}" y="{height - 24}" width="10" height="10" '
                    f'fill="{_PALETTE[j % len(_PALETTE)]}"/>')
        body.append(_text(lx + 14, height - 15, name, size=10))
        lx += 14 + 7 * len(name) + 14
    return _document(width, height, body)


def render_confusion_heatmap(cm: ConfusionMatrix, title: str) -> str:
    """2x2 heatmap (rows: actual, columns: predicted), shaded by share of pixels."""
    width, height = 360, 330
    cell = 110
    x0, y0 = 110, 70
    total = cm.total
    cells = (("TP", cm.tp, 0, 0), ("FN", cm.fn, 1, 0),
             ("FP", cm.fp, 0, 1), ("TN", cm.tn, 1, 1))

    body = [_text(width / 2, 26, title, size=14, anchor="middle")]
    body.append(_text(x0 + cell, 48, "predicted", anchor="middle", size=11))
    body.append(_text(x0 + cell / 2, y0 - 6, "positive", anchor="middle", size=10))
    body.append(_text(x0 + 3 * cell / 2, y0 - 6, "negative", anchor="middle", size=10))
    body.append(f'<text x="22" y="{y0 + cell}" font-size="11" text-anchor="middle" '
                f'fill="#333" transform="rotate(-90 22 {y0 + cell})">actual</text>')
    body.append(_text(x0 - 8, y0 + cell / 2 + 4, "positive", anchor="end", size=10))
    body.append(_text(x0 - 8, y0 + 3 * cell / 2 + 4, "negative", anchor="end", size=10))

    for label, count, col, row in cells:
        frac = count / total if total else 0.0
        # white through mid blue; dark cells flip their text to white
        shade = int(round(255 - 155 * frac))
        fill = f"rgb({shade - 30},{shade},255)" if shade >= 130 else "rgb(75,100,255)"
        x = x0 + col * cell
        y = y0 + row * cell
        body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                    f'fill="{fill}" stroke="#666"/>')
        text_fill = "#111" if frac < 0.55 else "#fff"
        body.append(_text(x + cell / 2, y + cell / 2 - 4, label, anchor="middle",
                          size=12, fill=text_fill))
        body.append(_text(x + cell / 2, y + cell / 2 + 14, str(count), anchor="middle",
                          size=12, fill=text_fill))
    body.append(_text(width / 2, height - 14, f"total pixels: {total}",
                      anchor="middle", size=10, fill="#777"))
    return _document(width, height, body)


def write_report_plots(report: TrainRunReport, out_dir: Path | str) -> list[Path]:
    """Render the full plot set for a report.

    Writes loss_curves.svg, metric_bars.svg, one confusion_fold_*.svg per
    fold, and confusion_aggregate.svg. Returns the written paths in order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name: str, svg: str) -> None:
        path = out / name
        path.write_text(svg, encoding="utf-8")
        written.append(path)

    emit("loss_curves.svg", render_loss_curves(report))
    emit("metric_bars.svg", render_metric_bars(report))
    for fold in report.folds:
        emit(f"confusion_fold_{fold.fold}.svg",
             render_confusion_heatmap(fold.confusion, f"Confusion, fold {fold.fold}"))
    emit("confusion_aggregate.svg",
         render_confusion_heatmap(report.aggregate_confusion, "Confusion, aggregate"))
    return written
