"""Two-stage text- and scene-conditioned 3D human motion synthesis."""

__version__ = "0.1.0"
