"""voxdet: sparse-voxel 3D object detection engine, CPU-only and deterministic."""

from voxdet.sparse import SparseTensor3D, voxelize

__all__ = ["SparseTensor3D", "voxelize"]
__version__ = "0.1.0"
