"""Sensitivity-informed learning of parametric inverter-dispatch OPF."""

__version__ = "0.1.0"
