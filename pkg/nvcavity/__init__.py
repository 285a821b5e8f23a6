"""Simulation and inference toolkit for a solid-state emitter in a membrane fiber cavity"""

__version__ = "0.1.0"
