"""Tests for vgnn."""
