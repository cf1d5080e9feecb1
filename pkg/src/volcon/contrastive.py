"""Supervised contrastive loss over labeled embedding batches.

Given a batch of unit-norm embeddings ``z`` and integer labels, each row acts
as an anchor ``i``; its positives ``P(i)`` are the other rows sharing its
label and its contrast set ``A(i)`` is every other row. The per-anchor term is

    (-1 / |P(i)|) * sum_{p in P(i)} log( exp(z_i.z_p / t) / sum_{a in A(i)} exp(z_i.z_a / t) )

with temperature ``t``. Anchors with no positive are skipped (and counted);
the batch value is by default the mean over the anchors that were used, with
``reduction="sum"`` restoring the bare sum over anchors.

The SimCLR objective (NT-Xent) is the special case where the batch consists
of two augmented views per source image and every row is labeled by its
source index, so each anchor has exactly one positive.

Everything here is pure numpy in float64 and stateless; gradients are
analytic with respect to the embedding rows treated as free variables (the
caller's autodiff graph owns the chain rule through any normalization).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DegenerateBatchError

DEFAULT_TEMPERATURE = 0.07

# |row norm - 1| above this is rejected as an unnormalized embedding.
UNIT_NORM_TOLERANCE = 1e-5


@dataclass
class EmbeddingBatch:
    """B x D unit-norm embedding rows with one integer label per row."""

    embeddings: np.ndarray
    labels: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2:
            raise DataError(f"embeddings must be 2D (B, D), got shape {self.embeddings.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.embeddings):
            raise DataError("labels must be a 1D sequence with one entry per embedding row")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise DataError(f"labels must be integers, got dtype {self.labels.dtype}")
        b, d = self.embeddings.shape
        if b < 2:
            raise ConfigError(f"batch size must be >= 2, got {b}")
        if d < 1:
            raise ConfigError("embedding dimension must be >= 1")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")

    def check_unit_norms(self):
        norms = np.linalg.norm(self.embeddings, axis=1)
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > UNIT_NORM_TOLERANCE:
            raise DataError(
                f"embedding rows must be unit-norm within {UNIT_NORM_TOLERANCE:g} "
                f"(worst deviation {worst:.3e})"
            )


@dataclass
class LossResult:
    """Scalar loss plus anchor accounting (used + skipped = batch size)."""

    value: float
    num_anchors_used: int
    num_anchors_skipped: int
    # Per-anchor contributions (0.0 for skipped anchors); kept for diagnostics
    # and property tests, not part of the scalar contract.
    per_anchor: np.ndarray = field(default=None, repr=False)


def _log_denominators(batch: EmbeddingBatch):
    """Stabilized log of sum_{a != i} exp(z_i.z_a / t), plus the scaled logits."""
    logits = batch.embeddings @ batch.embeddings.T / batch.temperature
    off_diag = ~np.eye(len(logits), dtype=bool)
    # Max over A(i) only, so the largest retained exponent is exactly 0.
    row_max = np.max(logits, axis=1, where=off_diag, initial=-np.inf)
    shifted = np.exp(logits - row_max[:, None], where=off_diag, out=np.zeros_like(logits))
    log_denom = row_max + np.log(np.sum(shifted, axis=1))
    return logits, log_denom, off_diag


def _positive_mask(labels: np.ndarray) -> np.ndarray:
    mask = labels[:, None] == labels[None, :]
    np.fill_diagonal(mask, False)
    return mask


def supcon_loss(
    batch: EmbeddingBatch,
    reduction: str = "mean",
    check_norms: bool = True,
) -> LossResult:
    """Evaluate the supervised contrastive loss on one embedding batch.

    ``reduction="mean"`` averages over anchors that have at least one
    positive; ``"sum"`` keeps the bare sum over those anchors. Raises
    :class:`DegenerateBatchError` when no anchor has a positive and
    :class:`DataError` for non-unit rows (skippable via ``check_norms`` for
    callers that intentionally probe off-sphere points, e.g. finite
    differences).
    """
    result, _ = _loss_and_optional_gradient(batch, reduction, check_norms, want_gradient=False)
    return result


def supcon_gradient(
    batch: EmbeddingBatch,
    reduction: str = "mean",
    check_norms: bool = True,
) -> np.ndarray:
    """Analytic gradient of ``supcon_loss(...).value`` w.r.t. the embeddings.

    Rows are treated as free variables; the projection head's normalization
    chain rule is the caller's responsibility.
    """
    _, grad = _loss_and_optional_gradient(batch, reduction, check_norms, want_gradient=True)
    return grad


def supcon_loss_and_gradient(
    batch: EmbeddingBatch,
    reduction: str = "mean",
    check_norms: bool = True,
) -> tuple[LossResult, np.ndarray]:
    """Loss and gradient in one pass (shared similarity matrix)."""
    return _loss_and_optional_gradient(batch, reduction, check_norms, want_gradient=True)


def _loss_and_optional_gradient(batch, reduction, check_norms, want_gradient):
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if check_norms:
        batch.check_unit_norms()

    pos = _positive_mask(batch.labels)
    pos_counts = pos.sum(axis=1)
    used = pos_counts > 0
    num_used = int(used.sum())
    if num_used == 0:
        raise DegenerateBatchError(
            "no anchor has a positive: every label occurs exactly once in the batch"
        )

    logits, log_denom, off_diag = _log_denominators(batch)

    # log p(i, p) = z_i.z_p / t - log sum_{a != i} exp(z_i.z_a / t)
    log_prob = logits - log_denom[:, None]
    per_anchor = np.zeros(len(batch.labels))
    safe_counts = np.where(used, pos_counts, 1)
    per_anchor[used] = (
        -(log_prob * pos).sum(axis=1)[used] / safe_counts[used]
    )

    total = float(per_anchor.sum())
    value = total / num_used if reduction == "mean" else total
    result = LossResult(
        value=value,
        num_anchors_used=num_used,
        num_anchors_skipped=len(batch.labels) - num_used,
        per_anchor=per_anchor,
    )
    if not want_gradient:
        return result, None

    # dL/d logits[i, a] = w_i * (softmax_{A(i)}(a) - [a in P(i)] / |P(i)|),
    # with w_i the anchor weight (1/num_used for the mean reduction). The
    # gradient w.r.t. the rows then folds in both occurrences of z in z z^T.
    softmax = np.exp(log_prob, where=off_diag, out=np.zeros_like(log_prob))
    coeff = softmax - pos / safe_counts[:, None]
    coeff[~used] = 0.0
    weight = 1.0 / num_used if reduction == "mean" else 1.0
    coeff *= weight
    grad = (coeff + coeff.T) @ batch.embeddings / batch.temperature
    return result, grad


def simclr_loss(
    embeddings: np.ndarray,
    temperature: float = DEFAULT_TEMPERATURE,
    reduction: str = "mean",
    check_norms: bool = True,
) -> LossResult:
    """NT-Xent loss over paired views, expressed via the supervised loss.

    Rows ``2j`` and ``2j + 1`` must be the two views of source ``j``; the
    call is exactly ``supcon_loss`` with labels equal to source indices.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise DataError(f"embeddings must be 2D (2K, D), got shape {embeddings.shape}")
    if len(embeddings) % 2 != 0:
        raise DataError(
            f"paired-view batches need an even row count, got {len(embeddings)}"
        )
    labels = np.repeat(np.arange(len(embeddings) // 2), 2)
    return supcon_loss(
        EmbeddingBatch(embeddings, labels, temperature),
        reduction=reduction,
        check_norms=check_norms,
    )
