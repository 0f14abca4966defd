"""Payload backends and live A-to-B migration with verification."""
