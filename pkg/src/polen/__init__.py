"""Encrypted and polymorphic code toolchain for a small RV32IM machine."""

__version__ = "0.1.0"
