"""Edge-aware bokeh rendering with a depth-conditioned NAF generator."""

__version__ = "0.1.0"
