"""Sounding-object localization toolkit.

Subpackages: annotation (data model and parsing), metrics (HmBoxAUC, PiBR,
PNSR), tensor (reverse-mode differentiation), dnm (the dual-headed model),
synth (synthetic scene generator), cli (command line workflows).
"""

__version__ = "0.1.0"
