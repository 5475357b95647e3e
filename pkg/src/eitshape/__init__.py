"""Inclusion reconstruction in electrical impedance tomography.

Monotonicity tests and monotonicity-based regularization give a global initial
guess that a Kohn-Vogelius level-set descent then refines.
"""

__version__ = "0.1.0"
