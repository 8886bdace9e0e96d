"""Centralized numerical tolerances.

Every feasibility decision in the package goes through these constants so
that tests and callers agree on what "feasible" means.
"""

# Maximum absolute violation of an equality constraint for a point to count
# as feasible (normalization and marginalization rows alike).
EQ_TOL = 1e-9

# Entries above -NONNEG_TOL are treated as nonnegative.
NONNEG_TOL = 1e-12

# Row/column-sum accuracy required from the transportation solvers.
TRANSPORT_MARGINAL_TOL = 1e-10

# Reduced cost below -PIVOT_TOL triggers a simplex pivot.
PIVOT_TOL = 1e-11

# Floor applied inside logarithms of reference products and entropy terms.
LOG_FLOOR = 1e-300
