"""Scanner drift normalization for longitudinal volumetric MRI studies.

Two complementary corrections around a multi-atlas + voxel-classification
segmentation pipeline:

* atlas affine normalization: per-scan global affine intensity map fitted
  by least squares against registered atlases (pre-processing), and
* piecewise linear drift-shift: per-site intensity-vs-day models with
  breakpoints at shift events, used to correct biomarker tables
  (post-processing).

A synthetic phantom cohort generator provides ground truth for validation.
"""

__version__ = "0.1.0"
