"""Multichannel spatial audio codec: reference-channel sub-band coding plus
complex-ratio-filter spatial coding, with evaluation metrics and a room simulator."""

__version__ = "0.1.0"
