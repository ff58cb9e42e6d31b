"""Tests for the textdenoise package."""
