"""Three-stage corn kernel grading: purity, shape, then embryo orientation."""

__version__ = "0.1.0"
