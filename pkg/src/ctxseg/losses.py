"""Loss terms and composite objectives.

All losses are means over contributing pixels (not sums), so the lambda
weights transfer across batch and map sizes. The discriminator objective
is maximized by minimizing its negation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .constants import IGNORE


@dataclass
class LossReport:
    cls: float = 0.0
    adv_d: float = 0.0
    adv_g: float = 0.0
    rec: float = 0.0
    kl: float = 0.0
    total: float = 0.0
    pixel_count: int = 0

    CSV_HEADER = "step,phase,cls,adv_d,adv_g,rec,kl,total"

    def csv_row(self, step: int, phase: str) -> str:
        return (f"{step},{phase},{self.cls:.10g},{self.adv_d:.10g},"
                f"{self.adv_g:.10g},{self.rec:.10g},{self.kl:.10g},{self.total:.10g}")


def valid_mask(labels: np.ndarray) -> Tensor:
    """[N,h,w] labels -> [N,1,h,w] float mask of non-IGNORE pixels."""
    m = (np.asarray(labels) != IGNORE).astype(np.float64)
    return Tensor(m[:, None, :, :])


def _masked_pixel_mean(per_pixel: Tensor, mask: Tensor) -> Tensor:
    count = float(mask.data.sum())
    if count == 0:
        raise ContractError("loss mask selects zero pixels")
    return ad.mul(ad.sum_(ad.mul(per_pixel, mask)), Tensor(1.0 / count))


def rec_loss(x: Tensor, x_fake: Tensor, mask: Tensor) -> Tensor:
    """Mean over masked pixels of squared L2 feature distance."""
    if x.shape != x_fake.shape:
        raise ContractError(f"rec_loss shape mismatch: {x.shape} vs {x_fake.shape}")
    diff = ad.sub(x, x_fake)
    per_pixel = ad.sum_(ad.mul(diff, diff), axis=1, keepdims=True)
    return _masked_pixel_mean(per_pixel, mask)


def cls_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over non-IGNORE pixels of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    k = logits.shape[1]
    valid = labels != IGNORE
    if not valid.any():
        raise ContractError("cls_loss: every pixel is IGNORE")
    if labels[valid].max() >= k:
        raise ContractError(f"label id {labels[valid].max()} >= {k} classes")
    safe = np.where(valid, labels, 0)
    onehot = np.zeros(logits.shape)
    n_idx, h_idx, w_idx = np.nonzero(valid)
    onehot[n_idx, safe[valid], h_idx, w_idx] = 1.0
    ls = ad.log_softmax_channels(logits)
    count = float(valid.sum())
    return ad.mul(ad.sum_(ad.mul(ls, Tensor(onehot))), Tensor(-1.0 / count))


def _check_scores(scores: Tensor):
    d = scores.data
    if np.any(d <= 0.0) or np.any(d >= 1.0):
        raise ContractError("discriminator scores must lie strictly in (0,1)")


def adv_losses(d_real: Tensor | None, d_fake: Tensor, mask: Tensor):
    """Least-squares adversarial pair.

    Returns (adv_for_D, adv_for_G): D maximizes mean[real^2 + (1-fake)^2]
    (the real term is dropped when d_real is None, i.e. finetuning), G
    minimizes mean[(1-fake)^2].
    """
    _check_scores(d_fake)
    one_minus = ad.sub(Tensor(1.0), d_fake)
    fake_term = ad.mul(one_minus, one_minus)
    adv_g = _masked_pixel_mean(fake_term, mask)
    if d_real is None:
        adv_d = adv_g
    else:
        _check_scores(d_real)
        real_term = ad.mul(d_real, d_real)
        adv_d = ad.add(_masked_pixel_mean(real_term, mask), adv_g)
    return adv_d, adv_g


def kl_loss(mu: Tensor, sigma: Tensor) -> Tensor:
    """Mean over pixels of 0.5 * sum_channels(mu^2 + sigma^2 - ln sigma^2 - 1)."""
    if np.any(sigma.data <= 0):
        raise ContractError("kl_loss requires sigma > 0")
    var = ad.mul(sigma, sigma)
    # grouped so the standard-normal case is exactly zero elementwise
    per_chan = ad.sub(ad.add(ad.mul(mu, mu), var), ad.add(ad.log(var), Tensor(1.0)))
    per_pixel = ad.sum_(per_chan, axis=1)
    n_pixels = mu.shape[0] * mu.shape[2] * mu.shape[3]
    return ad.mul(ad.sum_(per_pixel), Tensor(0.5 / n_pixels))


def train_objective(cls: Tensor, adv_g: Tensor, rec: Tensor, kl: Tensor,
                    lambda1: float, lambda2: float) -> Tensor:
    """cls + adv + lambda1*rec + lambda2*kl (any term may be a constant 0)."""
    total = ad.add(cls, adv_g)
    total = ad.add(total, ad.mul(rec, Tensor(float(lambda1))))
    return ad.add(total, ad.mul(kl, Tensor(float(lambda2))))


def finetune_objective(cls: Tensor, adv_g: Tensor) -> Tensor:
    return ad.add(cls, adv_g)
