"""hybridact: a single causal transformer that predicts robot actions both
by diffusion denoising embedded in its token stream and by autoregressive
discrete decoding, trained jointly and fused at inference by a confidence
gate. Ships with a deterministic synthetic manipulation world for
end-to-end training and evaluation on a desk-scale budget.
"""

__version__ = "0.1.0"
