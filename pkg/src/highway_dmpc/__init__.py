"""Multi-lane highway micro-simulation with distributed MPC lane/speed planning."""

__version__ = "0.1.0"
