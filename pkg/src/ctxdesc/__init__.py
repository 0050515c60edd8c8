"""Context-augmented local feature descriptors.

Raw keypoint descriptors are enriched with a geometric context stream (a
permutation-equivariant encoder over keypoint positions and matchability)
and a visual context stream (regional features interpolated at each
keypoint), then summed and L2-normalized.
"""

__version__ = "0.1.0"
