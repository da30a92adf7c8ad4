"""Horizon certification and closed-loop MPC without terminal constraints."""

__version__ = "0.1.0"
