"""lumisplat: deterministic core of a relightable full-body character pipeline."""

__version__ = "0.1.0"
