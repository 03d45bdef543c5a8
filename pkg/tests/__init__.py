"""Tests for the plant_field pipeline."""
