"""Interactive teacher-student distillation for cooperative multi-agent gridworlds."""

__version__ = "0.1.0"
