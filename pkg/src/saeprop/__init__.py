"""Small-area estimation of proportions from sparse, informatively sampled
surveys: two-stage logistic-normal pipeline, four baseline models, a synthetic
census simulator and the evaluation-metric suite, on a self-contained
gradient-based MCMC engine."""

__version__ = "0.1.0"
