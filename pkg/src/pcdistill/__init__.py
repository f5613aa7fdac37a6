"""Feature-distance knowledge distillation for point-cloud classifiers."""

__version__ = "0.1.0"
