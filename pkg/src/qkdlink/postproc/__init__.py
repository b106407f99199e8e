"""Key reconciliation, verification, estimation and privacy amplification."""
