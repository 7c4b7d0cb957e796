"""Coupling-tightening loss terms."""
