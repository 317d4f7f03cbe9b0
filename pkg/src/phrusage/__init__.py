"""Usage management for personal health records.

Records are append-only sets of role-authored facts. Producers license
filtered views of their records to consumers under usage policies that are
partly resolved when a bundle is issued and partly evaluated at each use.
"""

__version__ = "0.1.0"
