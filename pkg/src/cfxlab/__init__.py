"""cfxlab: a desk-scale counterfactual-explanation laboratory.

Pipeline: synthesize a confounded dataset, train a latent codec and a
transport backbone, train the black-box classifier and distill a smoothed
surrogate, run the guided counterfactual search with dual-phase masking,
and score the results with the desiderata metric suite.
"""

__version__ = "0.1.0"
