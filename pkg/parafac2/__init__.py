"""Probabilistic and direct-fit PARAFAC2 toolkit."""
