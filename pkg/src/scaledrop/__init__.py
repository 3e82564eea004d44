"""Scale-Dropout binary neural networks, MC Bayesian inference and a spintronic CIM simulator."""

__version__ = "0.1.0"
