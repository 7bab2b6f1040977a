"""Desk-scale foundation-model pipeline for cancer screening from coded health records."""

__version__ = "0.1.0"
