"""Supervoxel morphology regression for registered cardiac CT.

Volumes are standardized to a template, partitioned into supervoxels,
summarized by robust per-supervoxel statistics, and regressed against age
or volume targets with standardization, PCA and OLS (or a small MLP).
"""

__version__ = "0.1.0"
