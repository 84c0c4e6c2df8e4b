"""Variational inference network over pooled sentence embeddings.

The latent path is the same in both modes; only the embedding source
differs. Baseline mode mean-pools learned word embeddings; llm mode
mean-pools precomputed token embeddings loaded from an embedding file.
The pooled vector goes through one affine layer producing (mu, log_var).
Dropout is applied to the pooled input during training, and separately
to the sampled latent by the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Node, ParamStore


@dataclass
class LatentSample:
    mu: Node       # (B, z)
    log_var: Node  # (B, z)
    z: Node        # (B, z)
    noise: np.ndarray


def init_encoder_params(store: ParamStore, in_dim: int, z_dim: int) -> None:
    store.param("enc.w", (in_dim, 2 * z_dim))
    store.param("enc.b", (2 * z_dim,), init="zeros")


def init_word_embeddings(store: ParamStore, vocab_size: int, dim: int) -> None:
    store.param("enc.embed", (vocab_size, dim))


def pool(rows: Node) -> Node:
    """Mean over the token axis of (B, n, d) -> (B, d)."""
    if rows.value.shape[1] < 1:
        raise ValueError("cannot pool zero rows")
    return ag.mean(rows, axis=1)


def pooled_word_embeddings(store: ParamStore, ids: np.ndarray) -> Node:
    return pool(ag.gather_rows(store["enc.embed"], np.atleast_2d(ids)))


def pooled_llm_embeddings(matrices: list[np.ndarray], dtype=np.float32) -> Node:
    """Mean-pool each sentence's (k, d) matrix; stack to a constant (B, d)."""
    pooled = np.stack([np.asarray(m, dtype=np.float64).mean(axis=0) for m in matrices])
    return ag.constant(pooled.astype(dtype))


def encode(
    store: ParamStore,
    pooled: Node,
    z_dim: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Node, Node]:
    """(mu, log_var) from the pooled embedding.

    With rng given, a dropout mask is drawn (training mode); without,
    evaluation mode, bit-identical across calls.
    """
    if store["enc.w"].value.shape[0] != pooled.value.shape[1]:
        raise ValueError(
            f"pooled dim {pooled.value.shape[1]} != encoder input dim {store['enc.w'].value.shape[0]}"
        )
    if rng is not None and dropout > 0.0:
        mask = ag.dropout_mask(rng, pooled.value.shape, dropout, dtype=pooled.value.dtype)
        pooled = ag.mul(pooled, ag.constant(mask))
    out = ag.affine(pooled, store["enc.w"], store["enc.b"])
    mu = ag.narrow(out, 1, 0, z_dim)
    log_var = ag.narrow(out, 1, z_dim, z_dim)
    return mu, log_var


def sample_latent(mu: Node, log_var: Node, noise: np.ndarray) -> LatentSample:
    """Reparametrized z = mu + exp(log_var/2) * noise; noise=0 gives z=mu."""
    noise = np.asarray(noise, dtype=mu.value.dtype)
    std = ag.exp(ag.mul(log_var, ag.constant(np.asarray(0.5, dtype=mu.value.dtype))))
    z = ag.add(mu, ag.mul(std, ag.constant(noise)))
    return LatentSample(mu, log_var, z, noise)


def kl_standard_normal(mu: Node, log_var: Node) -> Node:
    """KL(N(mu, diag exp(log_var)) || N(0, I)) per batch row: (B,).

    Closed form: 1/2 sum_i (mu_i^2 + exp(log_var_i) - 1 - log_var_i).
    """
    half = ag.constant(np.asarray(0.5, dtype=mu.value.dtype))
    one = ag.constant(np.asarray(1.0, dtype=mu.value.dtype))
    terms = ag.sub(ag.add(ag.mul(mu, mu), ag.exp(log_var)), ag.add(one, log_var))
    return ag.mul(half, ag.reduce_sum(terms, axis=1))
