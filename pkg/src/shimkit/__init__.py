"""Desk-scale RF shimming: synthetic B1+ data, MLS and multi-start Adam solvers,
and a residual CNN that predicts shim weights directly."""

__version__ = "0.1.0"
