"""Training losses with analytic gradients.

Every loss takes ``with_grad``; when set it returns ``(value, grad...)``.
"""

from dataclasses import dataclass, asdict

import numpy as np

from .energy import batch_subspace_scores, logsumexp, softmax
from .etf import EtfFrame
from .head import (BACKGROUND, ORIGIN_CURR, ORIGIN_PREV, PSEUDO_UNKNOWN, HeadParams,
                   ProposalBatch, backward, forward, joint_logits)


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_eus: float = 1.0
    w_ekd: float = 1.0
    margin: float = 0.5
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _focal_terms(x, t, alpha, gamma):
    """Elementwise sigmoid focal loss and its derivative in the logit."""
    p = _sigmoid(x)
    log_p = -_softplus(-x)
    log_q = -_softplus(x)
    q = 1.0 - p
    pos = -alpha * q**gamma * log_p
    neg = -(1.0 - alpha) * p**gamma * log_q
    d_pos = alpha * q**gamma * (gamma * p * log_p - q)
    d_neg = (1.0 - alpha) * p**gamma * (p - gamma * q * log_q)
    return np.where(t == 1, pos, neg), np.where(t == 1, d_pos, d_neg)


def sigmoid_focal_loss(logits, targets, alpha=0.25, gamma=2.0, with_grad=False):
    """Summed sigmoid focal loss over all entries of ``logits``."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    if x.shape != t.shape:
        raise ValueError(f"shape mismatch: logits {x.shape} vs targets {t.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("targets must be binary")
    loss, grad = _focal_terms(x, t, alpha, gamma)
    total = float(loss.sum())
    return (total, grad) if with_grad else total


def energy_margin_loss(offsets, labels, m=0.5, with_grad=False):
    """Squared hinge on the unknown offset, averaged over all proposals.

    GT-matched proposals pay ``max(0, m + offset)^2``, pseudo-unknowns pay
    ``max(0, m - offset)^2`` and background pays nothing.
    """
    off = np.asarray(offsets, dtype=np.float64)
    labels = np.asarray(labels)
    if off.shape != labels.shape:
        raise ValueError("offsets and labels must have equal length")
    n = off.size
    if n == 0:
        return (0.0, off.copy()) if with_grad else 0.0
    known = np.maximum(0.0, m + off) * (labels >= 0)
    unk = np.maximum(0.0, m - off) * (labels == PSEUDO_UNKNOWN)
    loss = float((known**2 + unk**2).sum() / n)
    if not with_grad:
        return loss
    return loss, (2.0 * known - 2.0 * unk) / n


def _subspace_targets(labels):
    t = np.zeros((len(labels), 2), dtype=np.int64)
    t[labels >= 0, 0] = 1
    t[labels == PSEUDO_UNKNOWN, 1] = 1
    return t


def subspace_focal_loss(scores, labels, alpha=0.25, gamma=2.0, with_grad=False):
    """Focal loss on ``[s_k, s_u]`` pairs, averaged over proposals.

    Targets are ``[1, 0]`` for GT-matched, ``[0, 1]`` for pseudo-unknown and
    ``[0, 0]`` for background proposals.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise ValueError("scores and labels must have equal length")
    n = len(labels)
    if n == 0:
        return (0.0, scores.copy()) if with_grad else 0.0
    loss, grad = _focal_terms(scores, _subspace_targets(labels), alpha, gamma)
    total = float(loss.sum() / n)
    return (total, grad / n) if with_grad else total


def eus_terms(frame: EtfFrame, features, labels, m=0.5, alpha=0.25, gamma=2.0,
              with_grad=False):
    """Margin and subspace-focal terms from raw features.

    Returns ``(energy, subspace)`` or, with ``with_grad``, ``(energy, subspace,
    g_energy, g_subspace)`` with gradients on the ``n x d`` feature matrix.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    if len(labels) == 0:
        z = np.zeros_like(features)
        return (0.0, 0.0, z, z.copy()) if with_grad else (0.0, 0.0)
    if not with_grad:
        s_k, s_u = batch_subspace_scores(frame, features)
        return (energy_margin_loss(s_u - s_k, labels, m),
                subspace_focal_loss(np.column_stack([s_k, s_u]), labels, alpha, gamma))
    s_k, s_u, p_k, p_u = batch_subspace_scores(frame, features, with_grad=True)
    energy, g_off = energy_margin_loss(s_u - s_k, labels, m, with_grad=True)
    sub, g_s = subspace_focal_loss(np.column_stack([s_k, s_u]), labels, alpha, gamma,
                                   with_grad=True)
    ds_k = p_k @ frame.known_half  # n x d
    ds_u = p_u @ frame.unknown_half
    g_energy = g_off[:, None] * (ds_u - ds_k)
    g_sub = g_s[:, :1] * ds_k + g_s[:, 1:] * ds_u
    return energy, sub, g_energy, g_sub


def eus_loss(features, labels, frame: EtfFrame, m=0.5, alpha=0.25, gamma=2.0,
             with_grad=False):
    """Sum of the energy margin and subspace focal terms."""
    if not with_grad:
        return sum(eus_terms(frame, features, labels, m, alpha, gamma))
    e, s, ge, gs = eus_terms(frame, features, labels, m, alpha, gamma, with_grad=True)
    return e + s, ge + gs


def ekd_loss(prev_logits, curr_logits, num_prev: int, with_grad=False):
    """Pairwise sub-head preference loss.

    ``prev_logits``/``curr_logits`` are ``z_cls`` rows (unknown node last) of
    proposals from previous and current tasks. The previous sub-head is
    ``[:num_prev]`` and the current one ``[num_prev:-1]``. Each side is
    mean-reduced; an empty side contributes zero.
    """
    total = 0.0
    grads = []
    for logits, sign in ((prev_logits, 1.0), (curr_logits, -1.0)):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.size == 0:
            grads.append(np.zeros_like(logits))
            continue
        logits = np.atleast_2d(logits)
        n = len(logits)
        s_prev = np.atleast_1d(logsumexp(logits[:, :num_prev], axis=1))
        s_curr = np.atleast_1d(logsumexp(logits[:, num_prev:-1], axis=1))
        margin = sign * (s_curr - s_prev)  # rival score minus own score
        total += float(_softplus(margin).sum() / n)
        if with_grad:
            w = _sigmoid(margin) * sign / n
            g = np.zeros_like(logits)
            g[:, :num_prev] = -w[:, None] * softmax(logits[:, :num_prev], axis=1)
            g[:, num_prev:-1] = w[:, None] * softmax(logits[:, num_prev:-1], axis=1)
            grads.append(g)
    return (total, grads[0], grads[1]) if with_grad else total


def l1_box_loss(pred, gt, with_grad=False):
    """Sum of absolute coordinate differences for one box or per row."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    g2 = np.atleast_2d(gt)
    if np.any(g2[:, 2] <= g2[:, 0]) or np.any(g2[:, 3] <= g2[:, 1]):
        raise ValueError("degenerate ground-truth box")
    diff = pred - gt
    loss = np.abs(diff).sum(axis=-1)
    loss = float(loss) if np.ndim(loss) == 0 else loss
    return (loss, np.sign(diff)) if with_grad else loss


def _giou_parts(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    wa = np.maximum(a[:, 2] - a[:, 0], 0.0)
    ha = np.maximum(a[:, 3] - a[:, 1], 0.0)
    wb = np.maximum(b[:, 2] - b[:, 0], 0.0)
    hb = np.maximum(b[:, 3] - b[:, 1], 0.0)
    ix1, iy1 = np.maximum(a[:, 0], b[:, 0]), np.maximum(a[:, 1], b[:, 1])
    ix2, iy2 = np.minimum(a[:, 2], b[:, 2]), np.minimum(a[:, 3], b[:, 3])
    iw, ih = np.maximum(ix2 - ix1, 0.0), np.maximum(iy2 - iy1, 0.0)
    inter = iw * ih
    union = wa * ha + wb * hb - inter
    cw = np.maximum(a[:, 2], b[:, 2]) - np.minimum(a[:, 0], b[:, 0])
    ch = np.maximum(a[:, 3], b[:, 3]) - np.minimum(a[:, 1], b[:, 1])
    hull = cw * ch
    return locals()


def giou(a, b):
    """Generalized IoU of boxes in ``(x1, y1, x2, y2)``, one box or per row."""
    q = _giou_parts(a, b)
    union = np.maximum(q["union"], 1e-12)
    hull = np.maximum(q["hull"], 1e-12)
    val = q["inter"] / union - (hull - union) / hull
    return float(val[0]) if np.ndim(a) == 1 else val


def giou_loss(pred, gt, with_grad=False):
    """``1 - giou(pred, gt)``, with gradient on ``pred``."""
    single = np.ndim(pred) == 1
    q = _giou_parts(pred, gt)
    a, b = q["a"], q["b"]
    union = np.maximum(q["union"], 1e-12)
    hull = np.maximum(q["hull"], 1e-12)
    inter = q["inter"]
    loss = 1.0 - (inter / union - 1.0 + union / hull)
    if not with_grad:
        return float(loss[0]) if single else loss
    # d giou = dI (1/U + I/U^2 - 1/H) + dA (1/H - I/U^2) - dH U/H^2
    c_i = 1.0 / union + inter / union**2 - 1.0 / hull
    c_a = 1.0 / hull - inter / union**2
    c_h = -union / hull**2
    iw, ih, wa, ha, cw, ch = q["iw"], q["ih"], q["wa"], q["ha"], q["cw"], q["ch"]
    has_i = (iw > 0) & (ih > 0)
    d_i = np.zeros_like(a)
    d_i[:, 0] = -ih * ((a[:, 0] > b[:, 0]) & has_i)
    d_i[:, 2] = ih * ((a[:, 2] < b[:, 2]) & has_i)
    d_i[:, 1] = -iw * ((a[:, 1] > b[:, 1]) & has_i)
    d_i[:, 3] = iw * ((a[:, 3] < b[:, 3]) & has_i)
    d_a = np.column_stack([-ha * (a[:, 2] > a[:, 0]), -wa * (a[:, 3] > a[:, 1]),
                           ha * (a[:, 2] > a[:, 0]), wa * (a[:, 3] > a[:, 1])])
    d_h = np.column_stack([-ch * (a[:, 0] < b[:, 0]), -cw * (a[:, 1] < b[:, 1]),
                           ch * (a[:, 2] > b[:, 2]), cw * (a[:, 3] > b[:, 3])])
    grad = -(c_i[:, None] * d_i + c_a[:, None] * d_a + c_h[:, None] * d_h)
    return (float(loss[0]), grad[0]) if single else (loss, grad)


def classification_targets(labels, num_known: int) -> np.ndarray:
    """Binary targets over ``C + 1`` nodes: class one-hot, unknown node, or none."""
    labels = np.asarray(labels)
    t = np.zeros((len(labels), num_known + 1), dtype=np.int64)
    gt = labels >= 0
    t[np.flatnonzero(gt), labels[gt]] = 1
    t[labels == PSEUDO_UNKNOWN, num_known] = 1
    return t


@dataclass
class LossResult:
    total: float
    terms: dict
    grads: HeadParams | None = None


def total_loss(batch: ProposalBatch, frame: EtfFrame, params: HeadParams,
               weights: LossWeights, replay_active: bool, with_grad=True,
               out=None) -> LossResult:
    """Weighted training objective and its gradient on every head parameter.

    Terms: focal loss on the joint logits (sum over nodes, mean over
    proposals), L1 and gIoU on GT-matched boxes (mean over matched), the EUS
    pair, and the sub-head distinction loss when ``replay_active``. ``out``
    may carry an already computed forward pass for these params.
    """
    n = len(batch)
    if out is None:
        out = forward(params, batch.raw, batch.boxes)
    terms = dict.fromkeys(("cls", "l1", "giou", "energy", "subspace", "ekd"), 0.0)
    if with_grad:
        g_cls = np.zeros_like(out.z_cls)
        g_obj = np.zeros(n)
        g_bbox = np.zeros((n, 4))
        g_feat = np.zeros_like(out.features)

    if n:
        targets = classification_targets(batch.labels, params.num_known)
        if with_grad:
            z_jt, jac = joint_logits(out.z_cls, out.z_obj, with_grad=True)
            lc, gj = sigmoid_focal_loss(z_jt, targets, weights.alpha, weights.gamma,
                                        with_grad=True)
            gc, go = jac(gj / n)
            g_cls += weights.w_cls * gc
            g_obj += weights.w_cls * go
        else:
            z_jt = joint_logits(out.z_cls, out.z_obj)
            lc = sigmoid_focal_loss(z_jt, targets, weights.alpha, weights.gamma)
        terms["cls"] = lc / n

    matched = np.flatnonzero(batch.matched)
    if matched.size:
        pred, gt = out.z_bbox[matched], batch.gt_boxes[matched]
        l1 = l1_box_loss(pred, gt, with_grad=with_grad)
        lg = giou_loss(pred, gt, with_grad=with_grad)
        k = matched.size
        if with_grad:
            (l1, gl1), (lg, gg) = l1, lg
            g_bbox[matched] = (weights.w_l1 * gl1 + weights.w_giou * gg) / k
        terms["l1"] = float(np.sum(l1) / k)
        terms["giou"] = float(np.sum(lg) / k)

    if weights.w_eus > 0 and n:
        res = eus_terms(frame, out.features, batch.labels, weights.margin,
                        weights.alpha, weights.gamma, with_grad=with_grad)
        terms["energy"], terms["subspace"] = res[0], res[1]
        if with_grad:
            g_feat += weights.w_eus * (res[2] + res[3])

    if replay_active and weights.w_ekd > 0:
        prev = np.flatnonzero(batch.origin == ORIGIN_PREV)
        curr = np.flatnonzero(batch.origin == ORIGIN_CURR)
        res = ekd_loss(out.z_cls[prev], out.z_cls[curr], params.num_prev,
                       with_grad=with_grad)
        if with_grad:
            res, gp, gcur = res
            if prev.size:
                g_cls[prev] += weights.w_ekd * gp
            if curr.size:
                g_cls[curr] += weights.w_ekd * gcur
        terms["ekd"] = res

    total = (weights.w_cls * terms["cls"] + weights.w_l1 * terms["l1"]
             + weights.w_giou * terms["giou"]
             + weights.w_eus * (terms["energy"] + terms["subspace"])
             + (weights.w_ekd * terms["ekd"] if replay_active else 0.0))
    if not with_grad:
        return LossResult(total, terms)
    grads = backward(params, batch.raw, out, g_cls=g_cls, g_obj=g_obj, g_bbox=g_bbox,
                     g_feat=g_feat)
    return LossResult(total, terms, grads)
