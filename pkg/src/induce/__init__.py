"""Grammar induction with neural and compound PCFGs.

The package trains probabilistic context-free grammars in Chomsky normal
form whose rule probabilities come from small neural networks, optionally
conditioned on a per-sentence latent vector inferred from precomputed
language-model embeddings. It also ships the surrounding workbench:
chart parsing, tree decoding, unsupervised-parsing metrics, run selection
and ablation probes.
"""

__version__ = "0.1.0"
