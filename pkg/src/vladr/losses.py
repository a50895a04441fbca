"""Training objectives: retrieval losses, cross-modal alignment, and
relation distillation.

All losses consume :class:`~vladr.autodiff.Tensor` inputs and return scalar
tensors.  Similarities are cosine throughout (inputs are normalized where
the contract requires it).  Temperatures default to contrastive practice
(0.07) but setting them to 1 recovers the plain softmax forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


class DegenerateBatchError(ValueError):
    """The batch cannot support the loss (missing positives or negatives)."""


@dataclass
class LossWeights:
    """Loss mixing weights and temperatures for one run."""

    alpha: float = 1.0
    beta: float = 1.0
    margin: float = 0.3
    tau_global: float = 0.07
    tau_local: float = 0.07
    tau_relation: float = 1.0
    tau_prompt: float = 0.07
    relation_diagonal: bool = True

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        for name in ("tau_global", "tau_local", "tau_relation", "tau_prompt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def triplet_loss(features, labels, margin: float = 0.3):
    """Batch-hard triplet loss on normalized features, Euclidean distances.

    For each anchor: hardest (farthest) positive minus hardest (closest)
    negative plus margin, hinged at zero, averaged over the batch.  Every
    label needs at least two instances and at least one negative.
    """
    f = ad.l2_normalize(_as_tensor(features))
    labels = np.asarray(labels)
    b = f.shape[0]
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        raise DegenerateBatchError("every label needs at least 2 instances in the batch")
    if not neg_mask.any(axis=1).all():
        raise DegenerateBatchError("batch contains a single identity; no negatives")
    sq = ad.tsum(f * f, axis=1, keepdims=True)
    d2 = sq + sq.mT - 2.0 * ad.matmul(f, f.mT)
    dist = ad.tsqrt(ad.relu(d2) + 1e-12)
    big = 1e9
    hardest_pos = ad.amax(dist + Tensor(np.where(pos_mask, 0.0, -big)), axis=1)
    hardest_neg = -ad.amax(-(dist + Tensor(np.where(neg_mask, 0.0, big))), axis=1)
    return ad.tmean(ad.relu(hardest_pos - hardest_neg + margin))


def ce_loss(logits, labels):
    """Mean negative log softmax probability of the true class."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2:
        raise DimensionError("logits must be (B, C)")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise IndexError(f"label out of range for {logits.shape[1]} classes")
    return -ad.tmean(ad.take_per_row(ad.log_softmax(logits), labels))


def global_align_loss(global_feats, prompt_feats, prompt_index, tau: float = 0.07):
    """Image-to-prompt contrastive alignment of the global feature.

    ``prompt_feats`` (K, d) are unit rows treated as constants;
    ``prompt_index[i]`` names the row belonging to instance ``i``.
    """
    g = _as_tensor(global_feats)
    prompts = np.asarray(prompt_feats.data if isinstance(prompt_feats, Tensor) else prompt_feats)
    idx = np.asarray(prompt_index, dtype=np.intp)
    if idx.shape != (g.shape[0],):
        raise DimensionError("prompt_index must give one row per instance")
    if idx.min() < 0 or idx.max() >= prompts.shape[0]:
        raise KeyError("prompt_index references a missing prompt row")
    logits = ad.matmul(g, Tensor(prompts.T)) / tau
    return ce_loss(logits, idx)


def local_contrastive_loss(v, t, tau: float = 0.07):
    """Symmetric in-batch contrastive loss for one attribute.

    Row ``i`` of ``v`` (visual) and ``t`` (textual) describe the same
    instance; both directions contrast against the batch and the two means
    are averaged (equivalently, summed and divided by ``2B``).
    """
    v = ad.l2_normalize(_as_tensor(v))
    t = ad.l2_normalize(_as_tensor(t))
    if v.shape != t.shape:
        raise DimensionError(f"feature shapes disagree: {v.shape} vs {t.shape}")
    b = v.shape[0]
    diag = np.arange(b)
    sims = ad.matmul(v, t.mT) / tau
    i2t = ad.take_per_row(ad.log_softmax(sims), diag)
    t2i = ad.take_per_row(ad.log_softmax(sims.mT), diag)
    return -0.5 * (ad.tmean(i2t) + ad.tmean(t2i))


def local_align_loss(vis_feats, text_feats, tau: float = 0.07):
    """Mean of the per-attribute contrastive losses over all attributes."""
    vis = _as_tensor(vis_feats)
    text = _as_tensor(text_feats)
    if vis.shape != text.shape:
        raise DimensionError(f"attribute blocks disagree: {vis.shape} vs {text.shape}")
    n_a = vis.shape[1]
    total = local_contrastive_loss(vis[:, 0, :], text[:, 0, :], tau)
    for p in range(1, n_a):
        total = total + local_contrastive_loss(vis[:, p, :], text[:, p, :], tau)
    return total / n_a


def relation_matrix(v, tau: float = 1.0, include_diagonal: bool = True):
    """Row-stochastic batch self-similarity of one attribute's features.

    ``v`` (B, d) must have unit rows.  The Gram matrix is row-softmaxed at
    temperature ``tau``; the self-similarity diagonal is kept by default.
    """
    v = _as_tensor(v)
    gram = ad.matmul(v, v.mT)
    if not include_diagonal:
        b = v.shape[0]
        if b > 1:
            gram = gram + Tensor(np.where(np.eye(b, dtype=bool), -1e9, 0.0))
    return ad.row_softmax(gram, temperature=tau)


def relation_distill_loss(current, reference, tau: float = 1.0, include_diagonal: bool = True):
    """Row-wise KL between current and reference relation matrices.

    ``current`` (B, N_a, d) carries gradients; ``reference`` is the frozen
    prior model's features on the same batch and stays constant.  The
    current model's row is the first KL argument.  Averages over rows and
    attributes.
    """
    cur = _as_tensor(current)
    ref = reference.data if isinstance(reference, Tensor) else np.asarray(reference)
    if cur.shape != ref.shape:
        raise DimensionError(f"feature blocks disagree: {cur.shape} vs {ref.shape}")
    b, n_a, _ = cur.shape
    total = None
    for p in range(n_a):
        r_cur = relation_matrix(cur[:, p, :], tau, include_diagonal)
        with ad.no_grad():
            r_ref = relation_matrix(Tensor(ref[:, p, :]), tau, include_diagonal)
        kl_rows = ad.tsum(r_cur * (ad.tlog(r_cur) - np.log(r_ref.data)), axis=1)
        term = ad.tmean(kl_rows)
        total = term if total is None else total + term
    return total / n_a


def prompt_loss(image_feats, prompt_bank, batch_ids, tau: float = 0.07):
    """Two-sided prompt-learning objective; gradients reach prompt rows only.

    ``image_feats`` (B, d) are unit-norm constants from the frozen-for-now
    backbone.  Image-to-prompt is cross-entropy over the batch's identities;
    prompt-to-image scores each identity by the mean softmax mass its prompt
    places on that identity's images.  Both terms are means and are summed.
    """
    feats = np.asarray(image_feats.data if isinstance(image_feats, Tensor) else image_feats)
    ids = list(batch_ids)
    uids = sorted(set(ids))
    if len(uids) < 2:
        raise DegenerateBatchError("prompt loss needs at least 2 identities in the batch")
    prompts = prompt_bank.encode_ids(uids)
    index = {y: i for i, y in enumerate(uids)}
    labels = np.array([index[y] for y in ids], dtype=np.intp)
    logits = ad.matmul(Tensor(feats), prompts.mT) / tau
    l_i2t = ce_loss(logits, labels)
    probs = ad.row_softmax(logits.mT)
    weights = np.zeros((len(uids), len(ids)))
    for col, y in enumerate(ids):
        weights[index[y], col] = 1.0
    weights /= weights.sum(axis=1, keepdims=True)
    masses = ad.tsum(probs * Tensor(weights), axis=1)
    l_t2i = -ad.tmean(ad.tlog(masses))
    return l_i2t + l_t2i


def total_loss(l_reid, l_global, weights: LossWeights, step: int,
               l_local_align=None, l_distill=None):
    """Combine the per-batch objectives into the optimized scalar.

    The distillation term is defined as zero on the first domain (no prior
    model exists); at later steps with ``beta > 0`` it must be supplied.
    Returns the scalar and a per-term breakdown of raw values.
    """
    total = l_reid + l_global
    breakdown = {
        "reid": float(l_reid.data),
        "global": float(l_global.data),
        "local_align": 0.0,
        "distill": 0.0,
    }
    if l_local_align is not None:
        breakdown["local_align"] = float(l_local_align.data)
        total = total + weights.alpha * l_local_align
    if step > 1:
        if weights.beta != 0 and l_distill is None:
            raise ValueError(f"distillation term required at step {step} with beta={weights.beta}")
        if l_distill is not None:
            breakdown["distill"] = float(l_distill.data)
            total = total + weights.beta * l_distill
    breakdown["total"] = float(total.data)
    return total, breakdown
