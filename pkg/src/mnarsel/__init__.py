"""Penalized mixture clustering with SRUW variable roles under MNARz missingness."""
