"""Tests for ensocast core functionalities."""
