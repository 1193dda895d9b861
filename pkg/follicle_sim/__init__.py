"""Follicle population dynamics solved along characteristics, with a finite-volume oracle."""
