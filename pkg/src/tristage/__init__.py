"""Three-stage universal speech enhancement: gap filling, separation, restoration."""

__version__ = "0.1.0"
