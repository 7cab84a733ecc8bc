"""Toolkit for building backdoored CNN classifiers and detecting them by
class-agnostic trigger reverse-engineering with an entropy-score test."""

__version__ = "0.1.0"
