"""Selective-scan fusion decoder with deformable sampling, on a minimal
autodiff tensor core, plus synthetic wide-FoV segmentation experiments and
analytic cost accounting."""

__version__ = "0.1.0"
