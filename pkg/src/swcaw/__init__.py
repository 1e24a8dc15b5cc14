"""Scenario-with-certificates design and anti-windup synthesis toolkit."""

__version__ = "0.1.0"
