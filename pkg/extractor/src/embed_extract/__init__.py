"""Batch extraction of last-layer token embeddings from a causal LM.

Reads a preprocessed corpus, runs each sentence through a pretrained
model, mean-pools subword hidden states back to corpus tokens and writes
the EMB1 container the parser side consumes.
"""

__version__ = "0.1.0"
