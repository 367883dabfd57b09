"""Tests package for ensocast."""
