"""Visible / masked / predicted token partitions and their pairwise group
matrices.

A plan partitions the N patch indices (class token excluded) into a visible
set of size N - floor(p*N) and a masked set of size floor(p*N); the
predicted set is a subset of the masked set of size floor(g*N), g <= p.
Counts use floor throughout, which keeps the predicted set inside the
masked set automatically.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import seeding


@dataclass(frozen=True)
class MaskPlan:
    num_tokens: int
    mask_ratio: float
    prediction_ratio: float
    visible_idx: np.ndarray  # sorted ascending
    masked_idx: np.ndarray  # sorted ascending
    predicted_idx: np.ndarray  # sorted ascending, subset of masked_idx
    seed: int

    @property
    def num_visible(self):
        return len(self.visible_idx)

    @property
    def num_masked(self):
        return len(self.masked_idx)

    @property
    def num_predicted(self):
        return len(self.predicted_idx)

    def mask_vector(self):
        """0/1 vector m with m[i] = 1 iff token i is masked."""
        m = np.zeros(self.num_tokens, dtype=np.int64)
        m[self.masked_idx] = 1
        return m


def make_mask_plan(num_tokens, mask_ratio, prediction_ratio, seed):
    """Seeded uniform partition: visible set is the head of a permutation of
    0..N-1, predicted set is the head of a permutation of the masked set.
    Deterministic given the seed (Philox-backed Fisher-Yates shuffles)."""
    if num_tokens < 1:
        raise ValueError(f"num_tokens must be >= 1, got {num_tokens}")
    if not (0.0 < mask_ratio < 1.0):
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    if not (0.0 < prediction_ratio <= mask_ratio):
        raise ValueError(
            f"prediction_ratio must lie in (0, mask_ratio={mask_ratio}], got {prediction_ratio}"
        )
    n_masked = int(np.floor(mask_ratio * num_tokens))
    n_predicted = min(int(np.floor(prediction_ratio * num_tokens)), n_masked)
    if n_predicted == 0:
        raise ValueError(
            f"floor(prediction_ratio * N) = 0 with N={num_tokens}, prediction_ratio={prediction_ratio}: nothing to supervise"
        )
    rng = seeding.generator(seed, seeding.MASK)
    perm = rng.permutation(num_tokens)
    visible = np.sort(perm[: num_tokens - n_masked])
    masked = np.sort(perm[num_tokens - n_masked :])
    sub = rng.permutation(n_masked)
    predicted = np.sort(masked[sub[:n_predicted]])
    return MaskPlan(
        num_tokens=num_tokens,
        mask_ratio=mask_ratio,
        prediction_ratio=prediction_ratio,
        visible_idx=visible,
        masked_idx=masked,
        predicted_idx=predicted,
        seed=seed,
    )


def with_predicted(plan, predicted_idx):
    """Same visible/masked split, different predicted subset (must stay
    inside the masked set)."""
    predicted_idx = np.sort(np.asarray(predicted_idx, dtype=np.int64))
    if not np.isin(predicted_idx, plan.masked_idx).all():
        raise ValueError("predicted indices must be a subset of the masked set")
    return replace(plan, predicted_idx=predicted_idx)


def full_prediction(plan):
    """Predict every masked token (decode-everything inference mode)."""
    return replace(plan, predicted_idx=plan.masked_idx.copy())


def group_matrices(plan):
    """Pairwise group indicators from the 0/1 mask vector m:
    mask_to_mask = outer(m, m), mask_to_visible = outer(m, 1 - m).
    Disjoint; entry counts are |masked|^2 and |masked| * |visible|."""
    m = plan.mask_vector()
    mask_to_mask = np.outer(m, m).astype(bool)
    mask_to_visible = np.outer(m, 1 - m).astype(bool)
    return mask_to_mask, mask_to_visible


def batch_plans(num_images, num_tokens, mask_ratio, prediction_ratio, run_seed, epoch, base_index=0, image_ids=None):
    """One plan per image, each from its own derived seed so plans are
    reproducible regardless of batching."""
    if image_ids is None:
        image_ids = range(base_index, base_index + num_images)
    return [
        make_mask_plan(
            num_tokens,
            mask_ratio,
            prediction_ratio,
            seeding.derive_seed(run_seed, seeding.MASK, epoch, int(i)),
        )
        for i in image_ids
    ]


def stack_index(plans, field):
    """Stack one index list across plans into a (B, K) array for batched
    gathers."""
    return np.stack([getattr(p, field) for p in plans], axis=0)
