"""Seeded random instances for finite-difference gradient checks (d = 16, K = 8)."""

import numpy as np

from conftest import central_fd, rel_error
from owdet.etf import build_simplex_etf
from owdet.head import (BACKGROUND, PSEUDO_UNKNOWN, HeadParams, ProposalBatch, tag_origin)
from owdet.losses import (LossWeights, ekd_loss, eus_terms, giou_loss, l1_box_loss,
                          sigmoid_focal_loss, total_loss)

D, K, OBS = 16, 8, 4
N_INSTANCES = 100
FRAME = build_simplex_etf(K, D, seed=0)


def _labels(rng, n, num_known):
    return rng.choice(np.concatenate([np.arange(num_known), [PSEUDO_UNKNOWN, BACKGROUND]]),
                      size=n)


def _boxes(rng, n):
    xy = rng.uniform(0, 0.5, (n, 2))
    wh = rng.uniform(0.1, 0.5, (n, 2))
    return np.hstack([xy, xy + wh])


def focal_error(rng):
    x = rng.normal(0, 3, (6, 5))
    t = rng.integers(0, 2, x.shape)
    _, g = sigmoid_focal_loss(x, t, with_grad=True)
    return rel_error(g, central_fd(lambda v: sigmoid_focal_loss(v, t), x))


def _eus_error(rng, which):
    f = rng.normal(0, 2, (6, D))
    labels = _labels(rng, 6, 3)
    res = eus_terms(FRAME, f, labels, with_grad=True)
    return rel_error(res[2 + which], central_fd(lambda v: eus_terms(FRAME, v, labels)[which], f))


def energy_margin_error(rng):
    return _eus_error(rng, 0)


def subspace_focal_error(rng):
    return _eus_error(rng, 1)


def ekd_error(rng):
    num_prev, c = 3, 6
    prev = rng.normal(0, 2, (rng.integers(0, 4), c + 1))
    curr = rng.normal(0, 2, (rng.integers(1, 4), c + 1))
    _, gp, gc = ekd_loss(prev, curr, num_prev, with_grad=True)
    fp = central_fd(lambda v: ekd_loss(v, curr, num_prev), prev)
    fc = central_fd(lambda v: ekd_loss(prev, v, num_prev), curr)
    return rel_error(np.concatenate([gp.ravel(), gc.ravel()]),
                     np.concatenate([fp.ravel(), fc.ravel()]))


def l1_error(rng):
    gt = _boxes(rng, 5)
    # Keep every coordinate away from the kink at pred == gt.
    pred = gt + rng.choice([-1, 1], gt.shape) * rng.uniform(0.01, 0.2, gt.shape)
    _, g = l1_box_loss(pred, gt, with_grad=True)
    return rel_error(g, central_fd(lambda v: np.sum(l1_box_loss(v, gt)), pred))


def giou_error(rng):
    while True:
        a, b = _boxes(rng, 5), _boxes(rng, 5)
        # Min/max switches are kinks; keep coordinates well apart.
        gaps = np.abs(np.concatenate([a[:, [0, 2]] - b[:, [0, 2]], a[:, [1, 3]] - b[:, [1, 3]],
                                      a[:, [0, 1]] - b[:, [2, 3]], a[:, [2, 3]] - b[:, [0, 1]]]))
        if gaps.min() > 1e-3:
            break
    _, g = giou_loss(a, b, with_grad=True)
    return rel_error(g, central_fd(lambda v: np.sum(giou_loss(v, b)), a))


def random_problem(rng, n=10, num_prev=2, num_curr=2):
    params = HeadParams.init(rng, OBS, D, num_prev, feat_scale=1.0)
    params = params.add_task(rng, num_curr)
    params.cls_w = rng.normal(0, 0.5, params.cls_w.shape)
    params.cls_b = rng.normal(0, 0.2, params.cls_b.shape)
    params.obj_w = np.array(rng.normal(0, 1))
    params.obj_b = np.array(rng.normal(0, 0.5))
    params.box_w = rng.normal(0, 1, params.box_w.shape)
    params.box_b = rng.normal(0, 1, 4)
    labels = _labels(rng, n, params.num_known)
    labels[0] = 0
    labels[1] = num_prev
    boxes = _boxes(rng, n)
    gt = np.full((n, 4), np.nan)
    m = labels >= 0
    gt[m] = _boxes(rng, int(m.sum())) + 0.3
    batch = ProposalBatch(raw=rng.normal(0, 1, (n, OBS)), boxes=boxes, labels=labels,
                          gt_boxes=gt, origin=tag_origin(labels, params.num_prev),
                          image_ids=np.repeat([0, 1], [n // 2, n - n // 2]))
    return params, batch


def total_error(rng, weights=LossWeights(), replay_active=True):
    params, batch = random_problem(rng)
    res = total_loss(batch, FRAME, params, weights, replay_active)

    def fn(vec):
        return total_loss(batch, FRAME, params.with_flat(vec), weights, replay_active,
                          with_grad=False).total

    return rel_error(res.grads.flat(), central_fd(fn, params.flat()))


CHECKS = {
    "focal": focal_error,
    "energy-margin": energy_margin_error,
    "subspace-focal": subspace_focal_error,
    "EKD": ekd_error,
    "L1": l1_error,
    "gIoU": giou_error,
    "total": total_error,
}


def max_errors(n=N_INSTANCES, names=None):
    """Worst relative error per loss over ``n`` seeded instances."""
    out = {}
    for name in names or CHECKS:
        rng = np.random.default_rng([2024, list(CHECKS).index(name)])
        out[name] = max(CHECKS[name](rng) for _ in range(n))
    return out
