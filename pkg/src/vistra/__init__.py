"""Visualizing CNN channels over the course of transfer learning, at desk scale."""

__version__ = "0.1.0"
