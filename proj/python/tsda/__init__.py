"""Time-series domain adaptation: Fourier/time encoder, Sinkhorn alignment,
reconstruction-based correction and drift-based unknown rejection."""

from ._tsda import (
    UNKNOWN,
    accuracy,
    adapt,
    dft,
    dip,
    dip_pvalue,
    evaluate,
    generate_pair,
    gradient_probe,
    h_score,
    hann_window,
    idft,
    kmeans2,
    macro_f1,
    mmd,
    polar,
    sinkhorn,
)

__version__ = "0.3.0"
