"""Model-based transfer of control policies across parametric plant faults."""

__version__ = "0.1.0"
