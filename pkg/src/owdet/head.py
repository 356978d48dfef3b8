"""Toy detection head: affine feature map plus objectness, class and box branches.

Classifier layout is ``[task-1 classes | task-2 classes | ... | unknown]``; the
unknown node is always the last row. ``task_sizes`` records how many known
nodes each task contributed, which fixes the previous/current sub-head split.
"""

from dataclasses import dataclass, field

import numpy as np

from .energy import logsumexp, softmax

P_CLAMP = 1e-7
# Fixed output scale of the box residual. Keeps its L1 steps commensurate with
# normalized coordinates when one learning rate drives every parameter.
BOX_SCALE = 1e-3


@dataclass
class HeadParams:
    feat_w: np.ndarray  # d x D
    feat_b: np.ndarray  # d
    cls_w: np.ndarray  # (C+1) x d
    cls_b: np.ndarray  # C+1
    obj_w: np.ndarray  # scalar, as a 0-d array
    obj_b: np.ndarray
    box_w: np.ndarray  # 4 x d
    box_b: np.ndarray  # 4
    task_sizes: tuple = field(default=(), compare=False)
    box_scale: float = field(default=BOX_SCALE, compare=False)
    # Fixed input scale of the objectness branch, so that obj_w and obj_b see
    # comparable gradient magnitudes. ``init`` sets it to 1/sqrt(d).
    norm_scale: float = field(default=1.0, compare=False)

    ARRAYS = ("feat_w", "feat_b", "cls_w", "cls_b", "obj_w", "obj_b", "box_w", "box_b")

    @classmethod
    def init(cls, rng, obs_dim: int, feature_dim: int, num_known: int,
             feat_scale: float = 1.0, task_sizes=None):
        """Random feature map, near-zero classifier, zero box residual."""
        feat_w = rng.standard_normal((feature_dim, obs_dim)) * feat_scale / np.sqrt(obs_dim)
        return cls(
            feat_w=feat_w,
            feat_b=np.zeros(feature_dim),
            cls_w=rng.standard_normal((num_known + 1, feature_dim)) * 1e-3,
            cls_b=np.zeros(num_known + 1),
            obj_w=np.array(0.0),
            obj_b=np.array(0.0),
            box_w=np.zeros((4, feature_dim)),
            box_b=np.zeros(4),
            task_sizes=tuple(task_sizes) if task_sizes is not None else (num_known,),
            norm_scale=1.0 / np.sqrt(feature_dim),
        )

    @property
    def num_known(self) -> int:
        return self.cls_w.shape[0] - 1

    @property
    def num_prev(self) -> int:
        """Known nodes belonging to tasks before the latest one (the previous sub-head)."""
        return int(sum(self.task_sizes[:-1]))

    def task_slices(self) -> list:
        out, start = [], 0
        for n in self.task_sizes:
            out.append(slice(start, start + n))
            start += n
        return out

    def arrays(self):
        return [getattr(self, k) for k in self.ARRAYS]

    def _meta(self) -> dict:
        return {"task_sizes": self.task_sizes, "box_scale": self.box_scale,
                "norm_scale": self.norm_scale}

    def copy(self) -> "HeadParams":
        return HeadParams(*[a.copy() for a in self.arrays()], **self._meta())

    def zeros_like(self) -> "HeadParams":
        return HeadParams(*[np.zeros_like(a) for a in self.arrays()], **self._meta())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "HeadParams":
        parts, i = [], 0
        for a in self.arrays():
            parts.append(np.asarray(vec[i : i + a.size], dtype=np.float64).reshape(a.shape))
            i += a.size
        return HeadParams(*parts, **self._meta())

    def step(self, grads: "HeadParams", lr: float) -> "HeadParams":
        """Plain gradient descent: ``params - lr * grads``."""
        return HeadParams(*[a - lr * g for a, g in zip(self.arrays(), grads.arrays())],
                          **self._meta())

    def add_task(self, rng, n_new: int) -> "HeadParams":
        """Grow the classifier by ``n_new`` nodes inserted before the unknown node."""
        d = self.cls_w.shape[1]
        new_w = rng.standard_normal((n_new, d)) * 1e-3
        cls_w = np.vstack([self.cls_w[:-1], new_w, self.cls_w[-1:]])
        cls_b = np.concatenate([self.cls_b[:-1], np.zeros(n_new), self.cls_b[-1:]])
        out = self.copy()
        out.cls_w, out.cls_b = cls_w, cls_b
        out.task_sizes = self.task_sizes + (n_new,)
        return out

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).tolist() for k in self.ARRAYS}
        d.update(self._meta())
        d["task_sizes"] = list(self.task_sizes)
        return d


@dataclass
class HeadOutputs:
    features: np.ndarray  # n x d
    norms: np.ndarray  # n
    unit: np.ndarray  # n x d, zero rows where the norm is zero
    z_obj: np.ndarray  # n
    z_cls: np.ndarray  # n x (C+1)
    z_bbox: np.ndarray  # n x 4


def forward(params: HeadParams, raw, boxes=None) -> HeadOutputs:
    """Run the head on an ``n x D`` observation matrix.

    ``z_bbox`` is a residual on the proposal box:
    ``boxes + box_scale * (box_w f + box_b)``. Pass ``boxes=None`` to get the
    bare scaled affine output.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    f = raw @ params.feat_w.T + params.feat_b
    r = np.linalg.norm(f, axis=1)
    safe = np.where(r > 0, r, 1.0)
    unit = np.where(r[:, None] > 0, f / safe[:, None], 0.0)
    z_cls = unit @ params.cls_w.T + params.cls_b
    z_obj = params.obj_w * params.norm_scale * r + params.obj_b
    z_bbox = params.box_scale * (f @ params.box_w.T + params.box_b)
    if boxes is not None:
        z_bbox = z_bbox + np.atleast_2d(boxes)
    return HeadOutputs(f, r, unit, z_obj, z_cls, z_bbox)


def backward(params: HeadParams, raw, out: HeadOutputs, g_cls=None, g_obj=None,
             g_bbox=None, g_feat=None) -> HeadParams:
    """Accumulate parameter gradients from upstream gradients on the head outputs."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    n, d = out.features.shape
    grads = params.zeros_like()
    gf = np.zeros((n, d)) if g_feat is None else np.array(g_feat, dtype=np.float64)
    pos = out.norms > 0
    inv_r = np.where(pos, 1.0 / np.where(pos, out.norms, 1.0), 0.0)
    if g_cls is not None:
        grads.cls_w = g_cls.T @ out.unit
        grads.cls_b = g_cls.sum(axis=0)
        gu = g_cls @ params.cls_w
        radial = np.sum(gu * out.unit, axis=1)
        gf += (gu - radial[:, None] * out.unit) * inv_r[:, None]
    if g_obj is not None:
        grads.obj_w = np.array(np.dot(g_obj, out.norms) * params.norm_scale)
        grads.obj_b = np.array(g_obj.sum())
        gf += (g_obj * params.obj_w * params.norm_scale)[:, None] * out.unit
    if g_bbox is not None:
        g_bbox = params.box_scale * g_bbox
        grads.box_w = g_bbox.T @ out.features
        grads.box_b = g_bbox.sum(axis=0)
        gf += g_bbox @ params.box_w
    grads.feat_w = gf.T @ raw
    grads.feat_b = gf.sum(axis=0)
    return grads


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def joint_logits(z_cls, z_obj, with_grad: bool = False):
    """Joint class logits ``logit(softmax(z_cls) * sigmoid(z_obj))``.

    Probabilities are clipped to ``[1e-7, 1 - 1e-7]`` before the logit. With
    ``with_grad`` returns ``(z_jt, jac)`` where ``jac`` is a callable mapping an
    upstream gradient on ``z_jt`` to ``(g_cls, g_obj)``.
    """
    z_cls = np.asarray(z_cls, dtype=np.float64)
    single = z_cls.ndim == 1
    z_cls = np.atleast_2d(z_cls)
    z_obj = np.atleast_1d(np.asarray(z_obj, dtype=np.float64))
    lse = logsumexp(z_cls, axis=1)
    log_p = z_cls - np.atleast_1d(lse)[:, None] + _log_sigmoid(z_obj)[:, None]
    p = np.exp(log_p)
    clipped = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    z_jt = np.log(clipped) - np.log1p(-clipped)
    res = z_jt[0] if single else z_jt
    if not with_grad:
        return res
    active = (p > P_CLAMP) & (p < 1.0 - P_CLAMP)
    sm = softmax(z_cls, axis=1)
    sig_neg = np.exp(_log_sigmoid(-z_obj))  # 1 - sigmoid(z_obj)

    def jac(g_jt):
        g = np.atleast_2d(g_jt) * active / (1.0 - np.where(active, p, 0.0))
        tot = g.sum(axis=1)
        g_cls = g - sm * tot[:, None]
        g_obj = sig_neg * tot
        return (g_cls[0], g_obj[0]) if single else (g_cls, g_obj)

    return res, jac


def unknown_logit(z_cls_known) -> float:
    """Energy-based unknown logit, the log-sum-exp of the known-class logits."""
    z = np.asarray(z_cls_known, dtype=np.float64)
    if z.shape[-1] == 0:
        raise ValueError("need at least one known-class logit")
    return logsumexp(z, axis=-1)


def calibrate_unknown(z_u, offsets, eps: float = 1e-8) -> np.ndarray:
    """Shift per-proposal unknown logits by their standardized unknown offsets.

    ``z_u' = z_u + std(z_u) * (offsets - mean) / std(offsets)``, with all
    statistics taken over one image's proposals (population std). When either
    std falls below ``eps`` the calibration term is zero.
    """
    z_u = np.asarray(z_u, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    if z_u.shape != offsets.shape:
        raise ValueError("z_u and offsets must have the same shape")
    if z_u.size == 0:
        return z_u.copy()
    sd_off = offsets.std()
    sd_z = z_u.std()
    if sd_off < eps or sd_z < eps:
        return z_u.copy()
    return z_u + sd_z * (offsets - offsets.mean()) / sd_off


# Proposal status codes. Non-negative labels are ground-truth class ids.
PSEUDO_UNKNOWN = -1
BACKGROUND = -2

# Task-of-origin tags used by the sub-head distinction loss.
ORIGIN_NONE, ORIGIN_PREV, ORIGIN_CURR = 0, 1, 2


@dataclass
class ProposalBatch:
    """Proposals of one or more images, already matched.

    ``labels`` holds a class id for GT-matched proposals, or ``PSEUDO_UNKNOWN``
    / ``BACKGROUND``. ``gt_boxes`` rows are NaN unless the proposal is
    GT-matched. ``image_ids`` groups proposals for per-image statistics.
    """

    raw: np.ndarray  # n x D
    boxes: np.ndarray  # n x 4
    labels: np.ndarray  # n, int
    gt_boxes: np.ndarray  # n x 4
    origin: np.ndarray  # n, int
    image_ids: np.ndarray  # n, int

    def __len__(self):
        return len(self.labels)

    @property
    def matched(self) -> np.ndarray:
        return self.labels >= 0


def tag_origin(labels, num_prev: int) -> np.ndarray:
    """Previous/current task tag for GT-matched proposals, none otherwise."""
    labels = np.asarray(labels)
    origin = np.full(labels.shape, ORIGIN_NONE, dtype=np.int64)
    origin[(labels >= 0) & (labels < num_prev)] = ORIGIN_PREV
    origin[labels >= num_prev] = ORIGIN_CURR
    return origin
