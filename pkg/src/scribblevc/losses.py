"""Training objectives: scribble cross-entropy, mixed pseudo-label Dice,
gated CRF smoothness and multi-label classification."""

import math
from dataclasses import asdict, dataclass

import torch

LOG_EPS = 1e-8
PROB_EPS = 1e-7
DICE_SMOOTH = 1e-5


@dataclass
class LossWeights:
    scribble: float = 1.0
    pseudo: float = 0.5
    crf: float = 0.1
    cls: float = 0.1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {v}")

    def as_tuple(self):
        return (self.scribble, self.pseudo, self.crf, self.cls)


@dataclass
class PseudoLabelConfig:
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError(f"threshold must lie in [0, 1), got {self.threshold}")


@dataclass
class CrfConfig:
    radius: int = 5
    sigma_xy: float = 3.0
    sigma_int: float = 0.1
    normalize: str = "pixels"

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")
        if self.sigma_xy <= 0 or self.sigma_int <= 0:
            raise ValueError("CRF bandwidths must be positive")
        if self.normalize not in ("pixels", "pairs"):
            raise ValueError(f"normalize must be 'pixels' or 'pairs', got {self.normalize!r}")


def partial_ce(y, scribble):
    """Cross-entropy over scribbled pixels, averaged over the labeled set.

    ``y`` holds per-pixel probabilities (B x K x H x W); ``scribble`` holds
    class ids with the sentinel K for unlabeled pixels.
    """
    K = y.shape[1]
    scribble = torch.as_tensor(scribble, device=y.device).long()
    if scribble.dim() == 2:
        scribble = scribble[None]
    bad = (scribble > K) | (scribble < 0)
    if bool(bad.any()):
        raise ValueError(f"scribble contains ids outside 0..{K - 1} and sentinel {K}")
    labeled = scribble < K
    n = int(labeled.sum())
    if n == 0:
        return y.sum() * 0.0
    idx = scribble.clamp(max=K - 1).unsqueeze(1)
    picked = torch.gather(y, 1, idx).squeeze(1)
    nll = -torch.log(picked.clamp_min(LOG_EPS))
    return (nll * labeled).sum() / n


def scribble_loss(scribble, y_cnn, y_trans):
    return (partial_ce(y_cnn, scribble) + partial_ce(y_trans, scribble)) / 2


def mix_pseudo(y_cnn, y_trans, alpha, threshold=0.5):
    """Threshold-gated alpha-mixture of the two branch probability maps.

    The gates are constants; the result is not renormalized. Callers detach
    it before using it as a target.
    """
    gate_cnn = (y_cnn > threshold).to(y_cnn.dtype).detach()
    gate_trans = (y_trans > threshold).to(y_trans.dtype).detach()
    return alpha * gate_cnn * y_cnn + (1 - alpha) * gate_trans * y_trans


def dice_loss(y, target, valid=None):
    """Soft Dice loss averaged over classes.

    ``valid`` (B x H x W bool) drops pixels from both numerator and
    denominator sums.
    """
    K = y.shape[1]
    target = torch.as_tensor(target, device=y.device).long()
    if target.dim() == 2:
        target = target[None]
    onehot = torch.nn.functional.one_hot(target.clamp(0, K - 1), K).permute(0, 3, 1, 2).to(y.dtype)
    if valid is not None:
        w = valid.to(y.dtype).unsqueeze(1)
        y = y * w
        onehot = onehot * w
    dims = (0, 2, 3)
    inter = (y * onehot).sum(dims)
    denom = y.sum(dims) + onehot.sum(dims)
    per_class = 1 - (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return per_class.mean()


def pseudo_loss(y_cnn, y_trans, Y):
    """Dice of both branches against argmax of the (detached) mixed label."""
    Y = Y.detach()
    target = Y.argmax(dim=1)
    valid = Y.sum(dim=1) > 0
    if not bool(valid.any()):
        return (y_cnn.sum() + y_trans.sum()) * 0.0
    return (dice_loss(y_cnn, target, valid) + dice_loss(y_trans, target, valid)) / 2


def gated_crf(Y, images, config=None):
    """Windowed bilateral smoothness penalty.

    For every ordered pixel pair (i, j) with j != i inside the square window
    of radius r, accumulates ``phi_ij * 0.5 * ||Y_i - Y_j||^2`` where
    ``phi`` is a Gaussian in position and intensity. With
    ``normalize="pixels"`` (default) the sum is divided by the number of
    pixels, i.e. each pixel pays the summed penalty of its window; with
    ``"pairs"`` it is divided by the number of contributing pairs. The
    one-half makes a one-hot disagreement cost exactly 1 per pair.
    """
    config = config or CrfConfig()
    images = torch.as_tensor(images, dtype=Y.dtype, device=Y.device)
    if images.dim() == 2:
        images = images[None, None]
    elif images.dim() == 3:
        images = images[:, None]
    B, K, H, W = Y.shape
    r = config.radius
    total = Y.new_zeros(())
    pairs = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            if abs(dy) >= H or abs(dx) >= W:
                continue
            ys, ye = max(0, -dy), min(H, H - dy)
            xs, xe = max(0, -dx), min(W, W - dx)
            a = Y[:, :, ys:ye, xs:xe]
            b = Y[:, :, ys + dy:ye + dy, xs + dx:xe + dx]
            ia = images[:, :, ys:ye, xs:xe]
            ib = images[:, :, ys + dy:ye + dy, xs + dx:xe + dx]
            spatial = (dy * dy + dx * dx) / (2 * config.sigma_xy ** 2)
            phi = torch.exp(-spatial - (ia - ib) ** 2 / (2 * config.sigma_int ** 2))
            total = total + (phi * 0.5 * ((a - b) ** 2).sum(1, keepdim=True)).sum()
            pairs += B * (ye - ys) * (xe - xs)
    if config.normalize == "pixels":
        return total / (B * H * W)
    if pairs == 0:
        return total
    return total / pairs


def bce(p, c):
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(c * torch.log(p) + (1 - c) * torch.log(1 - p)).mean()


def class_loss(p_cnn, p_trans, c):
    c = torch.as_tensor(c, dtype=p_cnn.dtype, device=p_cnn.device)
    if not bool(((c == 0) | (c == 1)).all()):
        raise ValueError("class targets must be 0/1")
    return (bce(p_cnn, c) + bce(p_trans, c)) / 2


TERMS = ("L_ss", "L_pl", "L_crf", "L_cls")


def total_loss(parts, weights=None):
    """Weighted sum of the four loss terms; ``parts`` is a mapping or 4-sequence."""
    weights = weights or LossWeights()
    if not isinstance(parts, dict):
        parts = dict(zip(TERMS, parts))
    total = 0.0
    for name, w in zip(TERMS, weights.as_tuple()):
        value = parts[name]
        if not math.isfinite(float(torch.as_tensor(value).detach())):
            raise FloatingPointError(f"loss term {name} is not finite: {float(value)}")
        total = total + w * value
    return total
