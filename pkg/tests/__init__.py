"""Tests for the template inversion lab."""
