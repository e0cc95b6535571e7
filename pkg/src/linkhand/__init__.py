"""Kinematic model, actuator simulation, grasp planning and evaluation tools
for a six-actuator linkage-driven robot hand."""

__version__ = "0.1.0"

__all__ = ["__version__"]
