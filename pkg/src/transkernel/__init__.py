"""A32-to-Thumb-2 binary translator with a cooperative kernel-service runtime."""

__version__ = "0.1.0"
