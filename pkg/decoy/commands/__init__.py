"""Decoy CLI command modules."""
