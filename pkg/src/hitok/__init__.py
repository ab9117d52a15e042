"""
hitok.

Hierarchical residual image tokenization: token sequences whose prefixes decode the
image at smaller scales, and a small next-scale transformer that uses them for
multi-scale super-resolution.
"""
