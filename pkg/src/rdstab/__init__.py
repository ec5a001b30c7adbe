"""Observer-based output feedback for 1-D semilinear reaction-diffusion
equations: spectral reduction, certificate synthesis and closed-loop
simulation."""

from . import functions, kf_search, lmi, simulator, spectral, synthesis

__all__ = ["functions", "kf_search", "lmi", "simulator", "spectral", "synthesis"]

__version__ = "0.1.0"
