"""Human-object interaction motion generation conditioned on visual and textual prior tokens."""

__version__ = "0.1.0"
