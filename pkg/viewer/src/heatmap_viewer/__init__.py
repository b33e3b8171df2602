"""Offline heatmap renderer for layer-mapping flow/cost matrix CSV exports."""

__version__ = "0.1.0"

from heatmap_viewer.matrices import MatrixSet, ParseError, load_matrix  # noqa: F401
from heatmap_viewer.render import build_figure, render, render_run  # noqa: F401
