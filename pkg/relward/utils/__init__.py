"""Shared helpers for file output and random streams."""
