"""Neural wireless radiance fields with conical-frustum encoding, built on numpy."""

__version__ = "0.1.0"
