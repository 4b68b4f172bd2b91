"""Figure rendering for exported energy-landscape and segmentation artifacts."""

__version__ = "0.1.0"

from .io import FigureSpec, MissingSidecar, PlotkitError, SchemaMismatch
from .render import metadata_path, render, render_all

__all__ = ["FigureSpec", "MissingSidecar", "PlotkitError", "SchemaMismatch",
           "metadata_path", "render", "render_all"]
