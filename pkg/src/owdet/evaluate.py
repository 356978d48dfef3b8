"""Inference pipeline and open-world detection metrics."""

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .energy import batch_subspace_scores, logsumexp, softmax
from .etf import EtfFrame
from .head import HeadParams, calibrate_unknown, forward
from .matching import iou_matrix, match_gt

UNKNOWN = -1


@dataclass
class Detections:
    boxes: np.ndarray  # n x 4
    scores: np.ndarray  # n
    labels: np.ndarray  # n, class id or UNKNOWN
    image_ids: np.ndarray  # n

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))

    def __len__(self):
        return len(self.scores)

    def take(self, idx) -> "Detections":
        return Detections(self.boxes[idx], self.scores[idx], self.labels[idx], self.image_ids[idx])

    @classmethod
    def concat(cls, parts) -> "Detections":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, k) for p in parts])
                     for k in ("boxes", "scores", "labels", "image_ids")))

    def to_jsonl(self) -> str:
        lines = []
        for b, s, c, i in zip(self.boxes, self.scores, self.labels, self.image_ids):
            rec = {"image_id": int(i), "box": [round(float(v), 6) for v in b],
                   "class_id": "unknown" if c == UNKNOWN else int(c),
                   "score": round(float(s), 6)}
            lines.append(json.dumps(rec))
        return "".join(line + "\n" for line in lines)


def nms(boxes, scores, labels, iou_threshold: float = 0.6) -> np.ndarray:
    """Greedy per-class non-maximum suppression; returns kept indices.

    The unknown label is just another class here. Equal scores keep the lower
    index first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[np.lexsort((idx, -scores[idx]))]
        ious = iou_matrix(boxes[idx], boxes[idx])
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if not alive[i]:
                continue
            keep.append(idx[i])
            alive[i + 1:] &= ious[i, i + 1:] < iou_threshold
    return np.array(sorted(keep), dtype=np.int64)


def final_class_logits(params: HeadParams, frame: EtfFrame, out, calibrate: bool = True):
    """Class logits with the unknown node replaced by the (calibrated) energy logit."""
    z_u = np.atleast_1d(logsumexp(out.z_cls[:, :-1], axis=1))
    if calibrate:
        s_k, s_u = batch_subspace_scores(frame, out.features)
        z_u = calibrate_unknown(z_u, s_u - s_k)
    z = out.z_cls.copy()
    z[:, -1] = z_u
    return z


def infer_scene(params: HeadParams, frame: EtfFrame, scene, score_threshold: float = 0.10,
                nms_iou: float = 0.6, calibrate: bool = True, image_id: int = 0) -> Detections:
    """Detections for one scene: calibrate, joint probabilities, threshold, per-class NMS.

    Thresholding before NMS gives the same survivors as after, since a
    suppressing box always outscores the box it suppresses.
    """
    if len(scene.raw) == 0:
        return Detections.empty()
    out = forward(params, scene.raw, scene.boxes)
    z = final_class_logits(params, frame, out, calibrate)
    obj = np.exp(-np.logaddexp(0.0, -out.z_obj))
    probs = softmax(z, axis=1) * obj[:, None]
    prop, cls = np.nonzero(probs >= score_threshold)
    if prop.size == 0:
        return Detections.empty()
    num_known = params.num_known
    labels = np.where(cls == num_known, UNKNOWN, cls)
    boxes = np.clip(out.z_bbox[prop], 0.0, 1.0)
    dets = Detections(boxes, probs[prop, cls], labels.astype(np.int64),
                      np.full(prop.size, image_id, dtype=np.int64))
    return dets.take(nms(dets.boxes, dets.scores, dets.labels, nms_iou))


def _greedy_tp(dets: Detections, gt_boxes, gt_images, iou_threshold):
    """VOC-style TP flags in descending score order, plus that order."""
    order = np.lexsort((np.arange(len(dets)), -dets.scores))
    tp = np.zeros(len(order), dtype=bool)
    used = np.zeros(len(gt_boxes), dtype=bool)
    by_image = {}
    for gi, im in enumerate(gt_images):
        by_image.setdefault(int(im), []).append(gi)
    for r, k in enumerate(order):
        cand = by_image.get(int(dets.image_ids[k]))
        if not cand:
            continue
        cand = np.array(cand)
        ious = iou_matrix(dets.boxes[k], gt_boxes[cand])[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold and not used[cand[j]]:
            used[cand[j]] = True
            tp[r] = True
    return tp, order


def average_precision(dets: Detections, gt_boxes, gt_images, iou_threshold: float = 0.5):
    """All-point interpolated AP for a single class.

    Returns ``None`` when the class has no ground truth.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n_gt = len(gt_boxes)
    if n_gt == 0:
        return None
    if len(dets) == 0:
        return 0.0
    tp, _ = _greedy_tp(dets, gt_boxes, np.asarray(gt_images), iou_threshold)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    rec = ctp / n_gt
    prec = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def unknown_recall(dets: Detections, gt_boxes, gt_images, iou_threshold: float = 0.5):
    """Percentage of unknown GT boxes hit by an unknown-labelled detection.

    Returns ``(recall, defined)``; with no unknown GT the recall is 0 and
    ``defined`` is False.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        warnings.warn("no unknown ground truth; U-Rec reported as 0", RuntimeWarning)
        return 0.0, False
    unk = dets.take(np.flatnonzero(dets.labels == UNKNOWN))
    tp, _ = _greedy_tp(unk, gt_boxes, np.asarray(gt_images), iou_threshold)
    return 100.0 * tp.sum() / len(gt_boxes), True


def h_score(known_map: float, u_recall: float) -> float:
    """Harmonic mean of known mAP and unknown recall."""
    if known_map < 0 or u_recall < 0:
        raise ValueError("metrics must be non-negative")
    s = known_map + u_recall
    return 0.0 if s == 0 else 2.0 * known_map * u_recall / s


def pca_project(features, labels=None):
    """Project features onto their top two principal components.

    Each component's first non-negligible loading is made positive. A
    rank-one point cloud gets a zero second coordinate.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least two feature vectors")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = np.zeros((2, x.shape[1]))
    tol = max(x.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    for k in range(min(2, len(s))):
        if s[k] <= tol:
            continue
        v = vt[k]
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        comps[k] = -v if nz.size and v[nz[0]] < 0 else v
    xy = xc @ comps.T
    if labels is None:
        return xy
    return [(float(a), float(b), lab) for (a, b), lab in zip(xy, labels)]


def energy_heatmap(params: HeadParams, groups) -> np.ndarray:
    """Mean sub-head score of each task's proposals under each task's sub-head.

    ``groups[i]`` is a ``z_cls`` matrix of GT-matched proposals whose class
    belongs to task ``i``; entry ``(i, j)`` averages ``logsumexp`` over the
    nodes of task ``j``. Empty groups give NaN rows.
    """
    slices = params.task_slices()
    hm = np.full((len(groups), len(slices)), np.nan)
    for i, z in enumerate(groups):
        z = np.atleast_2d(z)
        if z.size == 0:
            continue
        for j, sl in enumerate(slices):
            hm[i, j] = float(np.mean(logsumexp(z[:, sl], axis=1)))
    return hm


@dataclass
class EvalReport:
    task: int
    previous_map: float | None
    current_map: float
    known_map: float
    u_recall: float
    u_recall_defined: bool
    h_score: float
    class_ap: dict = field(default_factory=dict)
    heatmap: list = field(default_factory=list)
    per_class_scores: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_rounded(asdict(self)), indent=2, sort_keys=True) + "\n"


def _rounded(obj):
    if isinstance(obj, float):
        return None if np.isnan(obj) else round(obj, 6)
    if isinstance(obj, dict):
        return {str(k): _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    return obj


def _mean_ap(ap: dict, classes):
    vals = [ap[c] for c in classes if ap.get(c) is not None]
    return 100.0 * float(np.mean(vals)) if vals else 0.0


def evaluate_task(params: HeadParams, frame: EtfFrame, scenes, task: int, class_task,
                  calibrate: bool = True, score_threshold: float = 0.10,
                  nms_iou: float = 0.6, iou_threshold: float = 0.5):
    """Evaluate trained params on held-out scenes after ``task``.

    ``class_task`` maps class id to the (1-based) task that introduces it.
    Scenes need ``raw``, ``boxes``, ``obj_boxes`` and ``obj_classes``.
    Returns ``(report, detections, features, feature_labels)``.
    """
    class_task = np.asarray(class_task)
    known = np.flatnonzero(class_task <= task)
    all_dets, feats, feat_labels = [], [], []
    groups = [[] for _ in range(task)]
    score_sums = {}
    for sid, sc in enumerate(scenes):
        all_dets.append(infer_scene(params, frame, sc, score_threshold, nms_iou,
                                    calibrate, image_id=sid))
        out = forward(params, sc.raw, sc.boxes)
        s_k, s_u = batch_subspace_scores(frame, out.features)
        labels, _ = match_gt(sc.boxes, sc.obj_boxes, sc.obj_classes, iou_threshold)
        for p, c in enumerate(labels):
            if c < 0:
                feat_labels.append("background")
                continue
            acc = score_sums.setdefault(int(c), [0.0, 0.0, 0])
            acc[0] += s_k[p]
            acc[1] += s_u[p]
            acc[2] += 1
            t = class_task[c]
            feat_labels.append("known" if t <= task else "unknown")
            if t <= task:
                groups[t - 1].append(out.z_cls[p])
        feats.append(out.features)
    dets = Detections.concat(all_dets)

    gt_b, gt_c, gt_i = [], [], []
    for sid, sc in enumerate(scenes):
        gt_b.append(np.asarray(sc.obj_boxes).reshape(-1, 4))
        gt_c.append(np.asarray(sc.obj_classes))
        gt_i.append(np.full(len(sc.obj_classes), sid))
    gt_b, gt_c, gt_i = np.concatenate(gt_b), np.concatenate(gt_c), np.concatenate(gt_i)

    ap = {}
    for c in known:
        sel = gt_c == c
        ap[int(c)] = average_precision(dets.take(np.flatnonzero(dets.labels == c)),
                                       gt_b[sel], gt_i[sel], iou_threshold)
    prev = [int(c) for c in known if class_task[c] < task]
    curr = [int(c) for c in known if class_task[c] == task]
    unk = ~np.isin(gt_c, known)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        u_rec, defined = unknown_recall(dets, gt_b[unk], gt_i[unk], iou_threshold)
    known_map = _mean_ap(ap, [int(c) for c in known])
    heat = energy_heatmap(params, [np.array(g).reshape(-1, params.cls_w.shape[0])
                                   for g in groups])
    report = EvalReport(
        task=task,
        previous_map=_mean_ap(ap, prev) if prev else None,
        current_map=_mean_ap(ap, curr),
        known_map=known_map,
        u_recall=float(u_rec),
        u_recall_defined=defined,
        h_score=h_score(known_map, u_rec),
        class_ap={c: (None if v is None else 100.0 * v) for c, v in ap.items()},
        heatmap=heat.tolist(),
        per_class_scores={c: [v[0] / v[2], v[1] / v[2], v[2]]
                          for c, v in sorted(score_sums.items())},
    )
    return report, dets, np.vstack(feats), feat_labels
