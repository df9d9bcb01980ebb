"""Numerical modules for multi-line amplifiers: spectra, dispersion, energy, propagation and simulation."""
