"""Desk-scale optimization demos and the gradient-check suite."""
