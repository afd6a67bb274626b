"""Mechanism engine package."""
