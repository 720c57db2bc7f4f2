"""Gender-specific Bayesian spatio-temporal mortality modelling with climate covariates.

The package covers the full pipeline: station weather ingestion and
imputation, weekly covariate engineering (heat-index categories, week
classifiers), structured GMRF priors (Leroux spatial, first-order random
walks, Kronecker space/age/time interactions) with exact linear
constraints, Poisson latent-Gaussian inference via a simplified Laplace
scheme, synthetic-data simulation, and a CLI tying it together.
"""

__version__ = "0.1.0"
