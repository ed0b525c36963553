"""
deskrecon

Desk-scale multi-view depth estimation with metadata-augmented plane-sweep
cost volumes, TSDF fusion and depth/mesh evaluation, validated against an
exact synthetic ray-casting oracle.
"""

__version__ = "0.1.0"
__author__ = "deskrecon developers"
