"""Model-free spreading of large cloth with a simulated mobile manipulator."""

__version__ = "0.1.0"
