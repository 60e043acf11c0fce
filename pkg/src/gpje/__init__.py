"""Numerical toolkit for generated prescribed Jacobian equations.

Solves near-field reflector and refractor design problems posed as second
boundary value problems by homotopy continuation, and checks the results by
ray tracing and mass transport bookkeeping.
"""

__version__ = "0.1.0"
