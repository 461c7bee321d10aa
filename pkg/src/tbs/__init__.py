"""Few-shot segmentation with task-disruptive background suppression,
built on a small numpy-backed tensor core with hand-written gradients."""

__version__ = "0.1.0"
