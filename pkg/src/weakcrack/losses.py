"""Loss terms for the adversarial phases and the detector.

Composition conventions (see training.py for who is frozen when):

 - encoder phase:  rec_total = w_bce*bce + w_crack*L_C + w_road*L_R with
   L_C = masked_l1(1 - M_rec, I, O_C) and L_R = masked_l1(M_rec, I, O_R):
   the output decoded from the crack part must explain the complement region
   and vice versa, weighted by the encoder's own crack CAM.
 - classifier phase: same shape, but the two reconstruction parts enter
   *negated* (the classifier is rewarded for placing its CAM so that the
   frozen reconstructor fails), plus the center-consistency term.

Totals take the part values as signed scalars; the weights are always
positive. Reduction is everywhere the mean over all elements.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def classification_bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-class sigmoid BCE on (N,2) logits vs one-hot targets, mean reduced."""
    if logits.shape != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs targets "
                         f"{tuple(targets.shape)}")
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def masked_l1(mask: torch.Tensor, target: torch.Tensor,
              recon: torch.Tensor, sign: float = 1.0) -> torch.Tensor:
    """sign * mean(|mask * (target - recon)|). mask broadcasts over channels.

    sign=+1 penalizes reconstruction error inside the masked region; sign=-1
    rewards it (the adversarial classifier-phase direction).
    """
    if target.shape != recon.shape:
        raise ValueError("target/recon shapes differ")
    if sign not in (1.0, -1.0, 1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign!r}")
    diff = mask * (target - recon)
    if diff.shape != target.shape:
        raise ValueError(f"mask {tuple(mask.shape)} does not broadcast to "
                         f"{tuple(target.shape)}")
    return sign * diff.abs().mean()


def rec_total(bce, crack, road, weights) -> torch.Tensor:
    """Encoder-phase objective: weights.rec_* applied to signed parts."""
    return (weights.rec_bce * bce + weights.rec_crack * crack
            + weights.rec_road * road)


def cls_total(bce, crack, road, consistency, weights) -> torch.Tensor:
    """Classifier-phase objective: weights.cls_* / weights.consistency
    applied to signed parts (crack/road are negative by construction here)."""
    return (weights.cls_bce * bce + weights.cls_crack * crack
            + weights.cls_road * road + weights.consistency * consistency)


def detector_bce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixelwise sigmoid BCE between (H,W)-shaped logits and a {0,1} mask."""
    if logits.shape != target.shape:
        raise ValueError("detector logits/target shapes differ")
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))
