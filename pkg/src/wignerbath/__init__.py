"""Vibrational decoherence of a Morse oscillator in a Lennard-Jones bath.

Signed Wigner sampling of the initial vibrational superposition, classical
velocity-Verlet propagation of the full solute + solvent system, and purity
and divergence diagnostics of the resulting ensemble.
"""

__version__ = "0.1.0"
