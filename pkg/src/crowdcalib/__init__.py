"""crowdcalib: platform occupancy estimation from per-camera CV outputs."""

__version__ = "0.1.0"
