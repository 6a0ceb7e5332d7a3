"""Teacher-student part decoder for occluded person re-identification, with
an occlusion-aware retrieval benchmark and evaluation suite."""

__version__ = "0.1.0"
