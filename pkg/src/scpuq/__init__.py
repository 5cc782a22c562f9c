"""First-order uncertainty propagation for parametrized complementarity problems."""
