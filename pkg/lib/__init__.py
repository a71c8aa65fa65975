"""
TIR-IPW Library

Core modules for estimating and comparing mean Time-in-Range from
glucose trajectories with intermittent and informative monotone missingness
"""

__version__ = '1.0.0'
