"""pvlite: a deterministic, CPU-only point-voxel 3D detection pipeline."""

__version__ = "0.1.0"
