"""Loss terms of the joint objective and their weighted combination."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .diffcore import Tensor, absolute, as_tensor, clip, log, square, tsum
from .netblocks import SUPERVISOR_PAIRS, FeatureBundle, Projector

PROB_CLAMP = 1e-7
ALL_PAIRS = tuple(range(6))
FULL_RECONSTRUCTION_PAIRS = (0, 1)


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    c: float = 100.0
    l: float = 0.6
    adl: float = 400.0
    adf: float = 1.2
    au: float = 1.0
    fl: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise LossError(f"loss weight {f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LandmarkTarget:
    """Normalised (x, y) interleaved coordinates, shape (B, 2*n_land), and
    inter-ocular distances, shape (B,)."""

    coords: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=np.float64))
        self.d = np.atleast_1d(np.asarray(self.d, dtype=np.float64))
        if (self.d <= 0).any():
            raise LossError("inter-ocular distance must be strictly positive")
        if not np.isfinite(self.coords).all():
            raise LossError("landmark coordinates must be finite")
        if self.d.shape[0] not in (1, self.coords.shape[0]):
            raise LossError(f"{self.d.shape[0]} distances for {self.coords.shape[0]} samples")


@dataclass
class AuTarget:
    labels: np.ndarray
    class_weights: np.ndarray

    def __post_init__(self):
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if (self.class_weights <= 0).any():
            raise LossError("AU class weights must be positive")


def au_class_weights(occurrence_rates: Sequence[float]) -> np.ndarray:
    """Inverse-frequency weights normalised to mean 1."""
    r = np.asarray(occurrence_rates, dtype=np.float64)
    if ((r <= 0) | (r >= 1)).any():
        raise LossError(f"occurrence rates must lie in (0, 1), got {r}")
    inv = 1.0 / r
    return inv / inv.mean()


def landmark_loss(pred: Tensor, target: LandmarkTarget) -> Tensor:
    """Sum of squared coordinate errors over landmarks / (2 d^2), batch-averaged."""
    pred = as_tensor(pred)
    if pred.ndim == 1:
        pred = pred.reshape(1, -1)
    if pred.shape != target.coords.shape:
        raise LossError(f"prediction shape {pred.shape} != target shape {target.coords.shape}")
    scale = 1.0 / (2.0 * target.d ** 2)
    per_sample = tsum(square(pred - target.coords), axis=1) * scale
    return per_sample.mean()


def pair_alignment(recon: Tensor, orig: Tensor, proj_recon: Projector | None = None,
                   proj_orig: Projector | None = None) -> Tensor:
    """Channel-summed L1 distance averaged over spatial positions and batch."""
    a = proj_recon(recon) if proj_recon is not None else recon
    b = proj_orig(orig) if proj_orig is not None else orig
    if a.shape != b.shape:
        raise LossError(f"aligned features differ in shape: {a.shape} vs {b.shape}")
    n, _, h, w = a.shape
    return tsum(absolute(a - b)) / float(n * h * w)


def contrastive_alignment_loss(bundle: FeatureBundle | Mapping[str, Tensor],
                               projectors: Mapping[tuple[int, int], Projector] | None = None,
                               pairs: Sequence[int] = ALL_PAIRS,
                               return_terms: bool = False):
    """Six-pair alignment: (F_s', F_s), (F_t', F_t), (F_sl', F_sl), (F_sb', F_sb),
    (F_tl', F_tl), (F_tb', F_tb). ``pairs`` selects 0-based pair indices.

    Projector keys are (pair, side) with 1-based pair and side 1 = reconstructed,
    side 2 = original; ``projectors=None`` means identity projection.
    """
    feats = bundle.as_dict() if isinstance(bundle, FeatureBundle) else dict(bundle)
    terms: dict[str, Tensor] = {}
    total: Tensor | None = None
    for idx in pairs:
        recon_name, orig_name = SUPERVISOR_PAIRS[idx]
        for nm in (recon_name, orig_name):
            if feats.get(nm) is None:
                raise LossError(f"supervisor pair ({recon_name}, {orig_name}) is missing {nm}")
        p1 = projectors[(idx + 1, 1)] if projectors is not None else None
        p2 = projectors[(idx + 1, 2)] if projectors is not None else None
        term = pair_alignment(feats[recon_name], feats[orig_name], p1, p2)
        terms[recon_name] = term
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    return (total, terms) if return_terms else total


def au_loss(probs: Tensor, target: AuTarget) -> Tensor:
    """Weighted multi-label binary cross-entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    probs = as_tensor(probs)
    if probs.ndim == 1:
        probs = probs.reshape(1, -1)
    y = target.labels
    if probs.shape != y.shape:
        raise LossError(f"probability shape {probs.shape} != label shape {y.shape}")
    if probs.shape[1] != target.class_weights.shape[0]:
        raise LossError("class weight count does not match the number of AUs")
    p = clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ce = log(p) * y + log(1.0 - p) * (1.0 - y)
    n, n_au = probs.shape
    return -tsum(ce * target.class_weights) / float(n * n_au)


def landmark_feature_loss(d_l, f_sl: Tensor, f_tl: Tensor, source: LandmarkTarget,
                          target: LandmarkTarget | None) -> Tensor:
    """Landmark recovery from landmark-related features of both domains."""
    if target is None:
        raise LossError("target-domain landmark pseudo-labels are required")
    return landmark_loss(d_l(f_sl), source) + landmark_loss(d_l(f_tl), target)


def landmark_removal_d_step(d_l, f_sb: Tensor, f_tb: Tensor, source: LandmarkTarget,
                            target: LandmarkTarget) -> Tensor:
    """D_l regresses the true (or pseudo) landmarks from detached backgrounds."""
    return 0.5 * (landmark_loss(d_l(f_sb.detach()), source)
                  + landmark_loss(d_l(f_tb.detach()), target))


def landmark_removal_g_step(d_l, f_sb: Tensor, f_tb: Tensor, source: LandmarkTarget,
                            target: LandmarkTarget, mean_face: np.ndarray | None) -> Tensor:
    """Pull D_l's predictions on live backgrounds toward the canonical mean face."""
    if mean_face is None:
        raise LossError("canonical mean face is not configured")
    mf = np.asarray(mean_face, dtype=np.float64).reshape(1, -1)
    mean_s = LandmarkTarget(np.repeat(mf, f_sb.shape[0], axis=0), source.d)
    mean_t = LandmarkTarget(np.repeat(mf, f_tb.shape[0], axis=0), target.d)
    return 0.5 * (landmark_loss(d_l(f_sb), mean_s) + landmark_loss(d_l(f_tb), mean_t))


def adversarial_landmark_losses(d_l, f_sb: Tensor, f_tb: Tensor, source: LandmarkTarget,
                                target: LandmarkTarget, mean_face: np.ndarray | None
                                ) -> tuple[Tensor, Tensor]:
    """(discriminator member, generator member) of the landmark-removal game."""
    if mean_face is None:
        raise LossError("canonical mean face is not configured")
    return (landmark_removal_d_step(d_l, f_sb, f_tb, source, target),
            landmark_removal_g_step(d_l, f_sb, f_tb, source, target, mean_face))


def _lsq(scores: Tensor, label: float) -> Tensor:
    return square(scores - label).mean()


def domain_d_step(d_d, bundle: FeatureBundle) -> Tensor:
    """Real features toward their own domain, detached reconstructions toward the
    domain of their background (F_sltb -> 0, F_sbtl -> 1)."""
    return (_lsq(d_d(bundle.F_s.detach()), 1.0) + _lsq(d_d(bundle.F_t.detach()), 0.0)
            + _lsq(d_d(bundle.F_sltb.detach()), 0.0) + _lsq(d_d(bundle.F_sbtl.detach()), 1.0))


def domain_g_step(d_d, bundle: FeatureBundle, return_scores: bool = False):
    """Live reconstructions toward the domain of their background."""
    s_sltb = d_d(bundle.F_sltb)
    s_sbtl = d_d(bundle.F_sbtl)
    loss = _lsq(s_sltb, 0.0) + _lsq(s_sbtl, 1.0)
    if return_scores:
        return loss, {"F_sltb": s_sltb.data.copy(), "F_sbtl": s_sbtl.data.copy()}
    return loss


def adversarial_domain_losses(d_d, bundle: FeatureBundle) -> tuple[Tensor, Tensor]:
    """(discriminator member, generator member), least squares with 1 = source, 0 = target."""
    return domain_d_step(d_d, bundle), domain_g_step(d_d, bundle)


COMPONENTS = ("c", "l", "adl", "adf", "au", "fl")


def total_loss(weights: LossWeights, components: Mapping[str, Tensor | float]) -> Tensor:
    """Weighted sum over the six components; absent components count as zero."""
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise LossError(f"unknown loss components {sorted(unknown)}")
    total = Tensor(0.0)
    for name in COMPONENTS:
        if name not in components:
            continue
        value = as_tensor(components[name])
        if not np.isfinite(value.data).all():
            raise LossError(f"loss component {name!r} is not finite")
        w = getattr(weights, name)
        if w != 0.0:
            total = total + value * w
    return total
