"""Grouped vector quantization of encoder outputs.

The channel dimension is split into groups, each with its own codebook.
Frames map to their nearest entry under squared L2 (ties take the lowest
index).  The codebook learns only through the codebook loss; the encoder
feels the bottleneck through the commitment loss and receives an identity
gradient through the straight-through estimator.  Codebook usage is
summarized as perplexity, the collapse diagnostic tracked during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class QuantizeResult:
    z_q: Tensor                 # [T', D], straight-through quantized output
    indices: np.ndarray         # [T', G] selected entries per group
    codebook_loss: Tensor       # scalar, moves codebook entries only
    commit_loss: Tensor         # scalar (commitment weight applied), moves encoder only
    perplexity: float           # exp usage entropy, mean over groups


class Codebook:
    """Per-group entry tables plus exponentially smoothed usage counts."""

    def __init__(self, dim: int, n_groups: int = 2, n_entries: int = 128,
                 seed: int = 0, dtype=np.float32):
        if dim % n_groups != 0:
            raise ValueError(f"dim {dim} not divisible by {n_groups} groups")
        self.dim = dim
        self.n_groups = n_groups
        self.n_entries = n_entries
        self.group_dim = dim // n_groups
        rng = np.random.default_rng(seed)
        self.groups = [
            Tensor(rng.uniform(-1.0, 1.0, size=(n_entries, self.group_dim)).astype(dtype))
            for _ in range(n_groups)
        ]
        self.usage_ema = np.zeros((n_groups, n_entries))

    def init_from_outputs(self, z_e_values: np.ndarray, rng: np.random.Generator) -> None:
        """Reseed entries from rows of a batch of encoder outputs.

        Sampling rows of real activations avoids dead codes at small scale.
        """
        t = z_e_values.shape[0]
        for g, table in enumerate(self.groups):
            block = z_e_values[:, g * self.group_dim : (g + 1) * self.group_dim]
            picks = rng.integers(0, t, size=self.n_entries)
            table.values = block[picks].astype(table.values.dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {f"vq.group{g}.codebook": t for g, t in enumerate(self.groups)}

    def smooth_usage(self, counts: np.ndarray, decay: float = 0.99) -> None:
        self.usage_ema = decay * self.usage_ema + (1.0 - decay) * counts


def perplexity(counts) -> float:
    """exp of the Shannon entropy of a usage distribution, with 0*ln(0) = 0."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("perplexity requires a nonzero usage count")
    p = counts / total
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def usage_counts(indices: np.ndarray, n_entries: int) -> np.ndarray:
    """[G, K] occurrence counts from a [T', G] index matrix."""
    return np.stack(
        [np.bincount(indices[:, g], minlength=n_entries) for g in range(indices.shape[1])]
    )


def nearest_entries(block: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the nearest entry per row under squared L2; ties take the lowest."""
    d = (
        (block * block).sum(axis=1, keepdims=True)
        - 2.0 * block @ table.T
        + (table * table).sum(axis=1)
    )
    return np.argmin(d, axis=1)


def quantize(z_e: Tensor, codebook: Codebook, commitment_weight: float = 0.25) -> QuantizeResult:
    """Quantize each frame group-wise and compute both bottleneck losses.

    codebook_loss averages, over frames and groups, the squared distance
    from detached encoder outputs to the selected entries; commit_loss is
    the mirrored term times `commitment_weight` and moves only the encoder.
    """
    if z_e.ndim != 2 or z_e.shape[1] != codebook.dim:
        raise ad.ShapeError("quantize", z_e.shape, (codebook.dim,))
    gd = codebook.group_dim
    parts, idx_cols = [], []
    cb_terms, cm_terms = [], []
    for g, table in enumerate(codebook.groups):
        zg = ad.narrow(z_e, 1, g * gd, gd)
        idx = nearest_entries(zg.values, table.values)
        idx_cols.append(idx)
        e_sel = ad.embedding_lookup(table, idx)

        cb_diff = ad.sub(ad.stop_gradient(zg), e_sel)
        cb_terms.append(ad.reduce_mean(ad.reduce_sum(ad.mul(cb_diff, cb_diff), axis=1)))
        cm_diff = ad.sub(zg, ad.stop_gradient(e_sel))
        cm_terms.append(ad.reduce_mean(ad.reduce_sum(ad.mul(cm_diff, cm_diff), axis=1)))

        parts.append(ad.straight_through(zg, e_sel))

    scale = 1.0 / codebook.n_groups
    codebook_loss = _weighted_sum(cb_terms, scale)
    commit_loss = _weighted_sum(cm_terms, scale * commitment_weight)
    indices = np.stack(idx_cols, axis=1)
    ppl = float(np.mean([perplexity(c) for c in usage_counts(indices, codebook.n_entries)]))
    return QuantizeResult(
        z_q=ad.concat(parts, axis=1),
        indices=indices,
        codebook_loss=codebook_loss,
        commit_loss=commit_loss,
        perplexity=ppl,
    )


def _weighted_sum(terms: list[Tensor], scale: float) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, Tensor(np.asarray(scale, dtype=total.dtype)))


@dataclass(frozen=True)
class FrozenSelection:
    """Entry assignment and values captured from one quantize pass.

    Used to build the smooth surrogate the finite-difference oracle needs:
    the estimator's gradient is the true gradient of the loss with the
    selection held fixed and every stop-gradient realized as a constant.
    """

    indices: np.ndarray   # [T', G]
    e_sel: np.ndarray     # [T', D] entry values at capture time
    z_e: np.ndarray       # [T', D] encoder outputs at capture time


def freeze_selection(z_e_values: np.ndarray, qr: QuantizeResult) -> FrozenSelection:
    return FrozenSelection(
        indices=qr.indices.copy(),
        e_sel=qr.z_q.values.copy(),
        z_e=np.asarray(z_e_values).copy(),
    )


def quantize_frozen(
    z_e: Tensor, codebook: Codebook, sel: FrozenSelection, commitment_weight: float = 0.25
) -> QuantizeResult:
    """Quantize with a pinned entry assignment and constant detach captures.

    At the capture point this produces the same values and the same tape
    gradients as `quantize`, but the function it evaluates is smooth, so
    central differences measure exactly the estimator's gradient.
    """
    if z_e.ndim != 2 or z_e.shape[1] != codebook.dim:
        raise ad.ShapeError("quantize_frozen", z_e.shape, (codebook.dim,))
    gd = codebook.group_dim
    parts, cb_terms, cm_terms = [], [], []
    for g, table in enumerate(codebook.groups):
        lo = g * gd
        zg = ad.narrow(z_e, 1, lo, gd)
        e_live = ad.embedding_lookup(table, sel.indices[:, g])
        zg0 = Tensor(sel.z_e[:, lo : lo + gd].astype(z_e.dtype))
        e0 = Tensor(sel.e_sel[:, lo : lo + gd].astype(z_e.dtype))

        cb_diff = ad.sub(zg0, e_live)
        cb_terms.append(ad.reduce_mean(ad.reduce_sum(ad.mul(cb_diff, cb_diff), axis=1)))
        cm_diff = ad.sub(zg, e0)
        cm_terms.append(ad.reduce_mean(ad.reduce_sum(ad.mul(cm_diff, cm_diff), axis=1)))

        offset = Tensor((e0.values - zg0.values).astype(z_e.dtype))
        parts.append(ad.add(zg, offset))

    scale = 1.0 / codebook.n_groups
    ppl = float(np.mean([perplexity(c) for c in usage_counts(sel.indices, codebook.n_entries)]))
    return QuantizeResult(
        z_q=ad.concat(parts, axis=1),
        indices=sel.indices.copy(),
        codebook_loss=_weighted_sum(cb_terms, scale),
        commit_loss=_weighted_sum(cm_terms, scale * commitment_weight),
        perplexity=ppl,
    )
