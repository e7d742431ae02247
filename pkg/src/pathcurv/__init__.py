"""Monte Carlo verification of curvature bounds on path space.

Subpackages cover the smooth model geometries, the singular cone space,
path sampling and stochastic integrals, cylinder functions with parallel
gradients, projection martingales, the inequality checks themselves, and
the reproducible Monte Carlo plumbing underneath all of it.
"""

__version__ = "0.1.0"
