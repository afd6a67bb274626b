"""Experiment harness package."""
