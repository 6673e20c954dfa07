"""Numerical services: tensors, solvers, generators, persistence."""
