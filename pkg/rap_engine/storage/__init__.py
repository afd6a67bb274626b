"""Persistence of schemas, workloads and mechanism outputs."""
