"""Finite elements with switch detection for piecewise-smooth ODEs.

Simulation with implicit switch detection, forward sensitivities with the
correct jump conditions, and direct optimal control via MPCC homotopy, for
systems given in Stewart's dynamic-complementarity form.
"""

__version__ = "0.1.0"
