"""
Nekhoroshev Lab
Resonant and rational normal forms, split-step simulation, resonance measure and time planning
for the nonlocal NLS on the circle
"""

__version__ = "0.1.0"
