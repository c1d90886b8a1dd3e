"""Joint image and coil-sensitivity reconstruction for parallel MRI.

The image is a pair of sine-activated coordinate networks (real and imaginary
part), each coil sensitivity a pair of bivariate polynomials, and both are fit
directly to undersampled multi-coil k-space.
"""

__version__ = "0.1.0"
