"""2D finite element solver for quasi-static Biot poroelasticity.

Displacement is discretized with the lowest-order Mardal-Tai-Winther
nonconforming vector element, pressure with an enriched Galerkin pair
(continuous P1 plus cellwise constants) using an interior-penalty form
whose interior jumps may be over-penalized for preconditioner robustness.
Time stepping is Crank-Nicolson; each step solves one symmetric indefinite
system with MinRes and a block-diagonal operator preconditioner.
"""

__version__ = "0.1.0"
