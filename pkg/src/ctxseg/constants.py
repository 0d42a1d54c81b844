"""Sentinels shared across modules."""

# Label-map value marking pixels excluded from losses and metrics.
# Chosen to match the PGM encoding (maxval 255).
IGNORE = 255
