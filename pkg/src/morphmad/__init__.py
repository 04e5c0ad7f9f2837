"""Face morphing attack generation, pixel-wise supervised detection (PW-MAD)
and ISO/IEC 30107-3 style evaluation."""

__version__ = "0.1.0"
