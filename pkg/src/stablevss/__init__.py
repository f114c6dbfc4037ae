"""Stability-query video segmentation mechanisms and temporal-consistency evaluation."""

__version__ = "0.1.0"
