"""Core module for ensocast."""
