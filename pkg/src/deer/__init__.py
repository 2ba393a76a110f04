"""Dynamic early exit for chain-of-thought reasoning models.

The package drives a reasoning model through an OpenAI-compatible completion
endpoint (or a scripted stand-in), watches its thought stream for transition
points, induces trial answers there, and stops thinking once the trial answer
is confident enough.  ``deer.noise_lab`` checks the noise-robustness analysis
of the multi-prompt calibrated variant by Monte Carlo.
"""

__version__ = "0.1.0"
