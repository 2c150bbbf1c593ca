"""Tests for sitar-lab."""
