"""Mean-field forest fire toolkit.

Measures on [0, inf), the min-kernel spectral operator, aged branching
trees, coagulation ODE solvers, characteristic curves, the age transport
equation, and finite-n Monte Carlo simulation.
"""

__version__ = "0.1.0"
