"""Writer-adaptive handwriting recognition by meta-learning, on a numpy autodiff engine."""

__version__ = "0.1.0"
