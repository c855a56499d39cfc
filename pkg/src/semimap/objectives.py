"""Loss terms for pose regression, latent mapping, view prediction and the
least-squares adversarial game, plus their weighted combination.

All terms use sum reduction over the batch.  Inputs may be tensors or plain
arrays; arrays are lifted to constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

REFERENCE_BATCH = 64

# least-squares adversarial targets
LABEL_REAL = 1.0
LABEL_SYNTH = 0.0


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.2
    lambda_g: float = 1e-4
    lambda_m: float = 1e-5

    def __post_init__(self):
        for k in ("lambda_c", "lambda_g", "lambda_m"):
            v = getattr(self, k)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be a nonnegative finite number, got {v}")


def batch_scale(batch: int) -> float:
    """Factor keeping sum-reduced losses at the magnitude of a 64-sample batch."""
    if batch <= 0:
        raise ValueError(f"batch must be positive, got {batch}")
    return REFERENCE_BATCH / batch


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ad.ShapeError(op, a.shape, b.shape)


def pose_loss(pred, target) -> Tensor:
    """Sum over samples of the squared L2 distance between stacked joint vectors."""
    pred, target = _t(pred), _t(target)
    _same_shape("pose_loss", pred, target)
    return ad.sum_(ad.square(ad.sub(target, pred)))


def correspondence_loss(z_hat, z, detach_target: bool = True) -> Tensor:
    """Squared latent distance between mapped real and synthetic codes of each pair.

    With ``detach_target`` the synthetic codes act as a fixed target and
    receive no gradient.
    """
    z_hat, z = _t(z_hat), _t(z)
    _same_shape("correspondence_loss", z_hat, z)
    if detach_target:
        z = ad.constant(z.data)
    return ad.sum_(ad.square(ad.sub(z, z_hat)))


def view_loss(pred, target) -> Tensor:
    """Elementwise L1 between predicted and observed second views."""
    pred, target = _t(pred), _t(target)
    _same_shape("view_loss", pred, target)
    return ad.sum_(ad.abs_(ad.sub(target, pred)))


def _half_sq_to(logits: Tensor, label: float) -> Tensor:
    d = ad.sub(logits, ad.constant(np.full(logits.shape, label)))
    return ad.scalar_mul(ad.sum_(ad.square(d)), 0.5)


def discriminator_loss(real_scores, synth_scores) -> Tensor:
    """Least-squares discriminator objective: real toward 1, synthetic toward 0."""
    real_scores, synth_scores = _t(real_scores), _t(synth_scores)
    return ad.add(_half_sq_to(real_scores, LABEL_REAL), _half_sq_to(synth_scores, LABEL_SYNTH))


def mapper_adversarial_loss(real_scores) -> Tensor:
    """Pushes discriminator scores of mapped real latents toward the synthetic label."""
    return _half_sq_to(_t(real_scores), LABEL_SYNTH)


@dataclass
class LossParts:
    """Per-term values of one step; ``None`` marks an inactive term."""

    l_p: Tensor | None = None
    l_c: Tensor | None = None
    l_g: Tensor | None = None
    l_m: Tensor | None = None
    l_h: Tensor | None = None

    def values(self) -> dict:
        return {k: (0.0 if v is None else float(v.data.reshape(-1)[0])) for k, v in vars(self).items()}


def composite_loss(parts: LossParts, weights: LossWeights = LossWeights(), scale: float = 1.0) -> Tensor:
    """``l_p + lambda_c l_c + lambda_g l_g + lambda_m l_m``, times ``scale``.

    The discriminator term is excluded; it is minimised in its own step.
    """
    terms = []
    for value, w in ((parts.l_p, 1.0), (parts.l_c, weights.lambda_c), (parts.l_g, weights.lambda_g), (parts.l_m, weights.lambda_m)):
        if value is None or w == 0.0:
            continue
        terms.append(value if w == 1.0 else ad.scalar_mul(value, w))
    if not terms:
        return ad.constant(np.zeros(1))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total if scale == 1.0 else ad.scalar_mul(total, scale)
