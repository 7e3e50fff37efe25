"""Simulation and reconstruction toolkit for photon-to-phonon teleportation."""
__version__ = "0.1.0"
