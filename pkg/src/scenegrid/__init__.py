"""scenegrid: sparse-voxel 3D indoor scene recognition at desk scale."""

__version__ = "0.1.0"
