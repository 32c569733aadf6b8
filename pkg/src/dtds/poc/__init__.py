"""Desk-scale reenactment of the live traffic twin: trace replay, sampling, simulation, watching."""
