"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI lives in ``membrane_lab.cli``.
"""


class MembraneLabError(Exception):
    """Base class for all errors raised by membrane_lab."""


class ConfigError(MembraneLabError):
    """Scenario file missing, unparsable, or schema-invalid."""


class PointOutsideMeshError(MembraneLabError):
    """Requested point is not contained in any mesh element."""


class ContourOutsideDomainError(MembraneLabError):
    """A particle contour leaves the computational domain."""


class OverlappingParticlesError(MembraneLabError):
    """Two particles overlap where disjointness is required."""


class CoincidentPointsError(MembraneLabError):
    """Point constraints placed closer than the distinctness tolerance."""


class DegenerateModesError(MembraneLabError):
    """Kernel mode vectors are numerically linearly dependent."""


class NotPositiveDefiniteError(MembraneLabError):
    """Matrix handed to an SPD solve is singular or indefinite."""


class NoConvergenceError(MembraneLabError):
    """Iterative solve or quadrature failed to reach its tolerance."""


class RankDeficientError(MembraneLabError):
    """Constraint rows are linearly dependent."""


class InfeasibleScenarioError(MembraneLabError):
    """Scenario data describes an inadmissible configuration."""


class LineSearchError(MembraneLabError):
    """Backtracking line search could not find a descent step."""


class LevelSetError(MembraneLabError):
    """No point with the requested field value found along the search path."""
