"""Insensitizing controls for reaction-diffusion equations with dynamic boundary conditions.

The package works on a polar grid of an annulus and provides

* :mod:`geometry`: mesh, quadrature, bulk and surface operators;
* :mod:`weights`: Carleman and HUM weight tables;
* :mod:`solvers`: backward-Euler forward/backward solvers and the linear cascade;
* :mod:`nonlinear`: power nonlinearities and the Picard solver;
* :mod:`control`: penalised HUM synthesis and inequality probes;
* :mod:`sentinel`: the sentinel functional and insensitivity checks;
* :mod:`cli`: the ``insenscontrol`` command line tool.
"""

__version__ = "0.1.0"
