"""Simulation toolkit for cat qubits under dissipative, Kerr and TPE confinement."""

__version__ = "0.1.0"
