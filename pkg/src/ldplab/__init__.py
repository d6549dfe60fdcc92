"""Interacting diffusions in random environment on a lattice torus.

Modules:

* ``model``: specifications of the potential, kernel, environment and initial law.
* ``simulate``: Euler-Maruyama particle systems and their empirical measures.
* ``pde``: finite-volume McKean-Vlasov flows and backward semigroups.
* ``ldp``: rate functions of the empirical process in several representations.
* ``girsanov``: Radon-Nikodym weights between interacting and independent dynamics.
* ``varadhan``: a Laplace principle check on Bernoulli sample means.
* ``harness``: configured experiments and the ``ldp-lab`` command line.
"""
__version__ = "0.1.0"
