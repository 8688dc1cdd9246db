"""Decoy tests."""
