"""Many-to-many transformer layer distillation driven by an exact EMD solver."""

__version__ = "0.1.0"
