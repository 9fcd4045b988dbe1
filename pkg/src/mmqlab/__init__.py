"""mmqlab: a desk-scale quantization laboratory for a toy multimodal pipeline.

Quantizes individual components of a vision -> connector -> language model
with uniform, Hessian-compensated (GPTQ) and activation-aware (AWQ) methods,
sweeps bit-width/component grids, and attributes fidelity degradation to
components via impurity, permutation and Shapley importance with a consensus
ranking.
"""

__version__ = "0.1.0"
