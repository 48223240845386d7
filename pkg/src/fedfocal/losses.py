"""Classification losses: cross-entropy, focal, and the imbalance-adaptive
focal variant used for local client training.

All three reduce to one another by construction: with zero coefficients the
adaptive loss equals the focal loss bit for bit, and with gamma = 0 the
focal loss equals cross-entropy bit for bit, because multiplying by an exact
1.0 is exact in IEEE arithmetic.

The per-sample adaptive loss is -(1 + c) * (1 - p_t)^gamma * log(p_t) with
p_t the predicted probability of the true class and c the sample's
imbalance coefficient. gamma may be a trainable scalar parameter; its
gradient is strictly negative for p_t in (0, 1), so training drives gamma
upward and callers must project it back into configured bounds after each
optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .models import ModelParams
from .tensor import Tensor

PROB_FLOOR = 1e-12

LOSS_KINDS = ("ce", "focal", "adaptive_focal")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "adaptive_focal"
    gamma: float = 2.0
    gamma_trainable: bool = False
    gamma_lo: float = 0.5
    gamma_hi: float = 5.0
    blend: float = 0.5
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not 0.0 <= self.blend <= 1.0:
            raise ConfigError(f"blend must lie in [0, 1], got {self.blend}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.gamma_lo > self.gamma_hi:
            raise ConfigError(f"gamma bounds inverted: [{self.gamma_lo}, {self.gamma_hi}]")
        if self.gamma_trainable and not (self.gamma_lo <= self.gamma <= self.gamma_hi):
            raise ConfigError(f"initial gamma {self.gamma} outside bounds "
                              f"[{self.gamma_lo}, {self.gamma_hi}]")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


def _one_hot(labels, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ContractError(f"labels must be a vector, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in 0..{num_classes - 1}")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def _true_class_prob(logits: Tensor, labels) -> Tensor:
    if logits.data.ndim != 2:
        raise ContractError(f"logits must be [batch, classes], got shape {logits.shape}")
    onehot = T.constant(_one_hot(labels, logits.shape[1], logits.dtype))
    probs = T.softmax(logits, axis=1)
    return T.sum_(T.mul(probs, onehot), axis=1)


def per_sample_losses(logits: Tensor, labels, *, gamma=None,
                      coeffs=None) -> Tensor:
    """Vector of per-sample losses; the scalar losses are its batch mean.

    gamma None selects plain cross-entropy; a float or a scalar tensor turns
    on the focal factor; coeffs (one nonnegative value per sample) adds the
    adaptive multiplier (1 + c).
    """
    p_t = _true_class_prob(logits, labels)
    nll = T.scale(T.log(T.clamp(p_t, PROB_FLOOR, 1.0)), -1.0)
    if gamma is None:
        out = nll
    else:
        base = T.clamp(T.sub(T.constant(np.ones_like(p_t.data)), p_t),
                       PROB_FLOOR, 1.0)
        out = T.mul(T.power(base, gamma), nll)
    if coeffs is not None:
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != (logits.shape[0],):
            raise ContractError(f"need one coefficient per sample: got shape "
                                f"{coeffs.shape} for batch {logits.shape[0]}")
        if np.any(coeffs < 0):
            raise ContractError("imbalance coefficients must be >= 0")
        out = T.mul(T.constant((1.0 + coeffs).astype(logits.dtype)), out)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log p_t."""
    return T.mean(per_sample_losses(logits, labels))


def focal_loss(logits: Tensor, labels, gamma=2.0) -> Tensor:
    """Mean over the batch of -(1 - p_t)^gamma * log(p_t)."""
    if not isinstance(gamma, Tensor) and gamma < 0:
        raise ContractError(f"gamma must be >= 0, got {gamma}")
    return T.mean(per_sample_losses(logits, labels, gamma=gamma))


def adaptive_focal_loss(logits: Tensor, labels, coeffs, gamma=2.0) -> Tensor:
    """Mean over the batch of -(1 + c) * (1 - p_t)^gamma * log(p_t).

    coeffs come from imbalance.dynamic_coefficient, one per sample.
    """
    if coeffs is None:
        raise ContractError("adaptive focal loss needs per-sample coefficients")
    return T.mean(per_sample_losses(logits, labels, gamma=gamma, coeffs=coeffs))


def batch_loss(logits: Tensor, labels, cfg: LossConfig, *,
               coeffs=None, gamma_param: Tensor | None = None) -> Tensor:
    """Dispatch on the configured loss kind.

    gamma_param, when given, is the trainable scalar living in the model's
    parameter list; otherwise the configured constant is used.
    """
    if cfg.kind == "ce":
        return cross_entropy(logits, labels)
    gamma = gamma_param if gamma_param is not None else cfg.gamma
    if cfg.kind == "focal":
        return focal_loss(logits, labels, gamma=gamma)
    return adaptive_focal_loss(logits, labels, coeffs, gamma=gamma)


def clamp_gamma(params: ModelParams, cfg: LossConfig) -> None:
    """Project the trainable gamma back into its configured bounds."""
    if "loss.gamma" not in params:
        return
    g = params["loss.gamma"]
    g.data[...] = np.clip(g.data, cfg.gamma_lo, cfg.gamma_hi)


def gamma_value(params: ModelParams, cfg: LossConfig) -> float:
    if cfg.gamma_trainable and "loss.gamma" in params:
        return float(params["loss.gamma"].data.reshape(()))
    return cfg.gamma
