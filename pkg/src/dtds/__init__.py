"""Digital Twin Descriptor Service: scene-graph descriptors fused with live context."""

__version__ = "0.1.0"
