"""Open-vocabulary decomposition of voxel radiance fields.

Multi-view mask proposals are aligned and fused into per-object embeddings,
distilled into an embedding grid trained next to a voxel radiance field, and
queried with text-embedding vectors.
"""

__version__ = "0.1.0"
