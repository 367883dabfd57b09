"""Utility helpers shared by the ensocast core modules."""
