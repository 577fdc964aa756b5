"""Staged transfer learning for stroke-onset classification on synthetic MRI."""

__version__ = "0.1.0"
