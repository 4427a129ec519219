"""Test suite for relward."""
