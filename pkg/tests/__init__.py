"""Tests for adaptive-gsfg."""
