"""Mask-level tools for instrument-style instance segmentation.

RLE masks and annotations, cross-class mask suppression, Challenge / ISI /
class IoU and AP50 metrics, an angular-margin classifier over mask-attended
multi-scale features, and a seeded synthetic scene generator.
"""

__version__ = "0.1.0"

from .errors import S3KitError  # noqa: E402,F401
