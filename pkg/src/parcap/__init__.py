"""Parabolic capacities on a space-time lattice."""
