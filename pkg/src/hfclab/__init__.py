"""Desk-scale class-incremental learning lab.

Implements a heterogeneous-forgetting-compensation training pipeline on top of
a from-scratch reverse-mode autodiff engine: a small attention-based feature
extractor with a task-semantic aggregation head, gradient-balanced losses,
herding exemplar memory, and a seeded experiment CLI.
"""

__version__ = "0.1.0"
