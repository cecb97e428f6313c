"""
Report module for rendering run summaries, sweep result tables and SVG
line charts from templates.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from jinja2 import Environment, FileSystemLoader, TemplateError, select_autoescape

from .instrumentation import DriftResult, InstrumentationError, RunLog, drift_table
from .run_tracker import RunSummary

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"
CHART_WIDTH = 640
CHART_HEIGHT = 320
CHART_MARGIN = 40
CHART_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                "#bcbd22", "#17becf")


class ReportError(Exception):
    """Custom exception for report rendering errors."""
    def __init__(self, message: str, template: Optional[str] = None):
        super().__init__(message)
        self.template = template


def _polyline(xs: Sequence[float], ys: Sequence[float], bounds: Tuple[float, float, float, float]) -> str:
    x_min, x_max, y_min, y_max = bounds
    span_x = (x_max - x_min) or 1.0
    span_y = (y_max - y_min) or 1.0
    inner_w = CHART_WIDTH - 2 * CHART_MARGIN
    inner_h = CHART_HEIGHT - 2 * CHART_MARGIN
    points = []
    for x, y in zip(xs, ys):
        px = CHART_MARGIN + (x - x_min) / span_x * inner_w
        py = CHART_HEIGHT - CHART_MARGIN - (y - y_min) / span_y * inner_h
        points.append(f"{px:.1f},{py:.1f}")
    return " ".join(points)


class ReportBuilder:
    """Renders the human-readable artifacts of runs and sweeps."""

    def __init__(self, template_dir: Union[str, Path] = TEMPLATE_DIR):
        self.template_dir = Path(template_dir)
        self.env = Environment(
            loader=FileSystemLoader(str(self.template_dir)),
            autoescape=select_autoescape(enabled_extensions=("svg.j2", "xml"), default_for_string=False),
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=True,
        )

    def _render(self, template_name: str, **context) -> str:
        try:
            return self.env.get_template(template_name).render(**context)
        except TemplateError as e:
            logger.error(f"Template error in {template_name}: {str(e)}")
            raise ReportError(f"Failed to render {template_name}: {str(e)}", template_name)

    def render_summary(self, summary: RunSummary, run_log: RunLog) -> str:
        """Run summary with selection outcome, drift table and final activation parameters."""
        try:
            drift: List[DriftResult] = drift_table(run_log)
        except InstrumentationError as e:
            logger.warning(f"No drift table for {summary.run_id}: {str(e)}")
            drift = []
        finals = sorted(
            (trace.layer, trace.role, trace.member, trace.raw[-1], trace.effective[-1])
            for trace in run_log.alpha_traces.values() if trace.raw
        )
        return self._render("summary.txt.j2", summary=summary, drift=drift, finals=finals)

    def write_summary(self, run_dir: Union[str, Path], summary: RunSummary, run_log: RunLog) -> Path:
        path = Path(run_dir) / "summary.txt"
        path.write_text(self.render_summary(summary, run_log), encoding="utf-8")
        logger.info(f"Summary written to {path}")
        return path

    def render_results_table(self, table) -> str:
        """Sweep table: mean ± standard error per cell, mean rank per row."""
        return self._render("results_table.txt.j2", table=table)

    def render_chart(self, title: str, series: Dict[str, Tuple[Sequence[float], Sequence[float]]],
                     x_label: str = "step", y_label: str = "") -> str:
        """
        Simple SVG line chart.

        Args:
            title: Chart title
            series: Label -> (x values, y values)
            x_label: Horizontal axis label
            y_label: Vertical axis label

        Returns:
            SVG document text
        """
        all_x = [x for xs, _ in series.values() for x in xs]
        all_y = [y for _, ys in series.values() for y in ys]
        if not all_x:
            raise ReportError(f"Chart '{title}' has no data")
        bounds = (min(all_x), max(all_x), min(all_y), max(all_y))
        lines = [
            {"label": label, "points": _polyline(xs, ys, bounds), "color": CHART_COLORS[i % len(CHART_COLORS)]}
            for i, (label, (xs, ys)) in enumerate(series.items())
        ]
        return self._render(
            "chart.svg.j2", title=title, lines=lines, bounds=bounds, x_label=x_label, y_label=y_label,
            width=CHART_WIDTH, height=CHART_HEIGHT, margin=CHART_MARGIN,
        )

    def write_charts(self, run_log: RunLog, out_dir: Union[str, Path]) -> List[Path]:
        """alpha_traces.svg (effective values) and preact_std.svg, when the run recorded them."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        alpha_series = {
            f"act{t.layer}/{t.member or t.role}": (t.steps, t.effective)
            for t in sorted(run_log.alpha_traces.values(), key=lambda t: t.key) if t.role != "beta"
        }
        if alpha_series:
            path = out_dir / "alpha_traces.svg"
            path.write_text(self.render_chart("Activation weights", alpha_series, y_label="effective value"),
                            encoding="utf-8")
            written.append(path)
        std_series = {f"layer {i}": (s.steps, s.stds) for i, s in sorted(run_log.preact.items())}
        if std_series:
            path = out_dir / "preact_std.svg"
            path.write_text(self.render_chart("Pre-activation standard deviation", std_series, y_label="std"),
                            encoding="utf-8")
            written.append(path)
        return written
