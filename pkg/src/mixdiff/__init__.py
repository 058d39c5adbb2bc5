"""Mixed-type diffusion models for multivariate time series.

Trains a joint denoising diffusion model over numerical channels
(Gaussian noise) and discrete channels including missingness masks
(uniform categorical noise), samples synthetic corpora from it, and
scores them against held-out real data.
"""

__version__ = "0.1.0"
