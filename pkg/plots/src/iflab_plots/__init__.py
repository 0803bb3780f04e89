"""Publication-style figures from iflab run directories.

This package reads only the documented CSV schemas a run directory
contains; it never imports the training library or touches its internal
state, and never writes into the run directory.
"""

__version__ = "0.1.0"
