"""Tests for the ensocast command line."""
