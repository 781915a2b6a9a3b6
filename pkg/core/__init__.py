"""Heaping Lab: birth-death reporting models for heaped count data."""
