"""Shared test helpers."""

from deformscan.deform_conv import perturb_predictors

# gradient checks need deformable offsets in general position, away from
# the integer kinks of the bilinear interpolant
nudge_offsets = perturb_predictors
