"""Data-parallel ray tracer: arbitrarily partitioned scenes, ray-queue
cycling over a rank ring, a collective render API, and a remote
frame-streaming service for thin display clients."""

__version__ = "0.1.0"
