"""Synthetic open-world benchmark: class prototypes, boxed scenes, incremental training.

Classes are numbered task by task: task ``t`` (1-based) introduces classes
``[(t-1) * classes_per_task, t * classes_per_task)``. Every scene keeps the
true class of every object; which objects count as annotated depends only
on the task being trained or evaluated.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .energy import batch_subspace_scores, logsumexp
from .etf import EtfFrame
from .head import HeadParams, ProposalBatch, calibrate_unknown, forward, tag_origin
from .losses import LossWeights, total_loss
from .matching import PseudoConfig, iou_matrix, match_gt, select_pseudo_unknowns

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    num_tasks: int = 4
    classes_per_task: int = 5
    d_in: int = 32
    noise: float = 1.2
    bg_scale: tuple = (0.5, 1.0)
    bg_per_scene: int = 20
    max_known: int = 3
    max_unknown: int = 2
    max_test_objects: int = 4
    scenes_per_task: int = 200
    test_scenes: int = 150
    n_exemplar: int = 10
    min_angle_deg: float = 60.0
    obj_side: tuple = (0.2, 0.7)
    bg_side: tuple = (0.05, 0.9)
    jitter: float = 0.04
    obj_shared: float = 0.0
    visibility: tuple = (1.0, 1.0)
    max_obj_iou: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for k in ("num_tasks", "classes_per_task", "d_in", "scenes_per_task", "max_known"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        lo, hi = self.obj_side
        if not 0 < lo <= hi <= 1:
            raise ValueError("obj_side must satisfy 0 < lo <= hi <= 1")

    @property
    def num_classes(self) -> int:
        return self.num_tasks * self.classes_per_task


@dataclass
class Scene:
    raw: np.ndarray  # n x d_in proposal observations
    boxes: np.ndarray  # n x 4 proposal boxes
    obj_boxes: np.ndarray  # m x 4
    obj_classes: np.ndarray  # m
    proposal_obj: np.ndarray  # n, source object or -1 for background

    def annotations(self, known_classes):
        """GT boxes and classes of the objects whose class is currently known."""
        sel = np.isin(self.obj_classes, known_classes)
        return self.obj_boxes[sel], self.obj_classes[sel]


@dataclass
class World:
    config: WorldConfig
    prototypes: np.ndarray  # num_classes x d_in, unit rows
    class_task: np.ndarray  # num_classes, 1-based task of each class
    train_scenes: list  # per task, list of Scene
    test_scenes: list

    def task_classes(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.class_task == t)

    def known_classes(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.class_task <= t)

    def unknown_classes(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.class_task > t)


def _sample_prototypes(rng, n, dim, min_angle_deg, shared=0.0, max_tries=10000):
    cos_max = np.cos(np.deg2rad(min_angle_deg))
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    protos = []
    for _ in range(max_tries):
        v = rng.standard_normal(dim)
        v -= np.dot(v, u) * u
        v /= np.linalg.norm(v)
        v = shared * u + np.sqrt(1.0 - shared ** 2) * v
        if all(abs(np.dot(v, p)) <= cos_max for p in protos):
            protos.append(v)
            if len(protos) == n:
                return np.array(protos)
    raise ValueError(f"could not place {n} prototypes {min_angle_deg} degrees apart in "
                     f"R^{dim}; lower min_angle_deg or raise d_in")


def _random_boxes(rng, n, lo, hi):
    wh = rng.uniform(lo, hi, size=(n, 2))
    xy = rng.uniform(0.0, 1.0, size=(n, 2)) * (1.0 - wh)
    return np.hstack([xy, xy + wh])


def _object_boxes(rng, n, lo, hi, max_iou, max_tries=1000):
    boxes = np.empty((0, 4))
    for _ in range(max_tries):
        if len(boxes) == n:
            return boxes
        cand = _random_boxes(rng, 1, lo, hi)
        if len(boxes) == 0 or iou_matrix(cand, boxes).max() <= max_iou:
            boxes = np.vstack([boxes, cand])
    raise ValueError(f"could not place {n} objects with pairwise IoU <= {max_iou}")


def _jitter(rng, boxes, scale):
    side = np.hstack([boxes[:, 2:] - boxes[:, :2]] * 2)
    out = np.clip(boxes + rng.normal(0.0, scale, boxes.shape) * side, 0.0, 1.0)
    out[:, 2:] = np.maximum(out[:, 2:], out[:, :2] + 1e-3)
    return np.clip(out, 0.0, 1.0)


def _make_scene(rng, world_cfg, prototypes, classes):
    m = len(classes)
    obj_boxes = _object_boxes(rng, m, *world_cfg.obj_side, world_cfg.max_obj_iou)
    sd = world_cfg.noise / np.sqrt(world_cfg.d_in)
    vis = rng.uniform(*world_cfg.visibility, size=(m, 1))
    obj_raw = vis * prototypes[classes] + rng.normal(0.0, sd, (m, world_cfg.d_in))
    n_bg = world_cfg.bg_per_scene
    bg_boxes = _random_boxes(rng, n_bg, *world_cfg.bg_side)
    amp = rng.uniform(*world_cfg.bg_scale, size=(n_bg, 1))
    bg_raw = amp * rng.normal(0.0, 1.0 / np.sqrt(world_cfg.d_in), (n_bg, world_cfg.d_in))
    raw = np.vstack([obj_raw, bg_raw])
    boxes = np.vstack([_jitter(rng, obj_boxes, world_cfg.jitter), bg_boxes])
    src = np.concatenate([np.arange(m), np.full(n_bg, -1)])
    perm = rng.permutation(len(raw))
    return Scene(raw[perm], boxes[perm], obj_boxes, np.asarray(classes, dtype=np.int64),
                 src[perm])


def generate_scene(world: World, task: int, rng) -> Scene:
    """A training scene for ``task``: current-task known objects plus unlabelled unknowns."""
    cfg = world.config
    if not 1 <= task <= cfg.num_tasks:
        raise ValueError(f"task must lie in [1, {cfg.num_tasks}]")
    cur = world.task_classes(task)
    unk = world.unknown_classes(task)
    known = rng.choice(cur, size=rng.integers(1, cfg.max_known + 1))
    n_unk = rng.integers(0, cfg.max_unknown + 1) if unk.size else 0
    classes = np.concatenate([known, rng.choice(unk, size=n_unk)]) if n_unk else known
    return _make_scene(rng, cfg, world.prototypes, classes)


def generate_test_scene(world: World, rng) -> Scene:
    cfg = world.config
    n = rng.integers(1, cfg.max_test_objects + 1)
    classes = rng.integers(0, cfg.num_classes, size=n)
    return _make_scene(rng, cfg, world.prototypes, classes)


def generate_world(config: WorldConfig) -> World:
    """Prototypes, per-task training scenes and a shared test set, all from ``config.seed``."""
    rng = np.random.default_rng([config.seed, 0])
    protos = _sample_prototypes(rng, config.num_classes, config.d_in, config.min_angle_deg,
                                config.obj_shared)
    class_task = np.repeat(np.arange(1, config.num_tasks + 1), config.classes_per_task)
    world = World(config, protos, class_task, [], [])
    for t in range(1, config.num_tasks + 1):
        srng = np.random.default_rng([config.seed, 1, t])
        world.train_scenes.append([generate_scene(world, t, srng)
                                   for _ in range(config.scenes_per_task)])
    trng = np.random.default_rng([config.seed, 2])
    world.test_scenes = [generate_test_scene(world, trng) for _ in range(config.test_scenes)]
    return world


@dataclass
class ExemplarStore:
    """Per-class lists of ``(task, scene_index)`` keys into ``World.train_scenes``."""

    by_class: dict = field(default_factory=dict)

    def scene_keys(self) -> list:
        return sorted({k for keys in self.by_class.values() for k in keys})

    def to_dict(self) -> dict:
        return {str(c): [list(k) for k in keys] for c, keys in sorted(self.by_class.items())}


def update_exemplars(store: ExemplarStore, world: World, task: int) -> ExemplarStore:
    """Add the first ``n_exemplar`` training scenes containing each class of ``task``."""
    n = world.config.n_exemplar
    by_class = dict(store.by_class)
    for c in world.task_classes(task):
        keys = [(task, i) for i, sc in enumerate(world.train_scenes[task - 1])
                if c in sc.obj_classes][:n]
        by_class[int(c)] = keys
    return ExemplarStore(by_class)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1.0
    steps: int = 1000
    replay_steps: int = 500
    batch_scenes: int = 1
    log_every: int = 50
    eus_enabled: bool = True
    ekd_enabled: bool = True
    feat_scale: float = 10.0


def build_batch(world: World, scenes, task: int, params: HeadParams, frame: EtfFrame,
                pseudo: PseudoConfig, calibrate: bool):
    """Match, pseudo-label and tag a list of scenes into one ProposalBatch.

    Returns the batch together with the forward pass used for pseudo-labelling.
    """
    known = world.known_classes(task)
    raw = np.vstack([sc.raw for sc in scenes])
    boxes = np.vstack([sc.boxes for sc in scenes])
    out = forward(params, raw, boxes)
    z_u = np.atleast_1d(logsumexp(out.z_cls[:, :-1], axis=1))
    if calibrate:
        s_k, s_u = batch_subspace_scores(frame, out.features)
        offsets = s_u - s_k
    labels, gt_boxes, image_ids = [], [], []
    start = 0
    for i, sc in enumerate(scenes):
        n = len(sc.raw)
        sl = slice(start, start + n)
        gb, gc = sc.annotations(known)
        lab, gidx = match_gt(sc.boxes, gb, gc, pseudo.iou_match_threshold)
        zu = calibrate_unknown(z_u[sl], offsets[sl]) if calibrate else z_u[sl]
        lab = select_pseudo_unknowns(lab, sc.boxes, zu, len(gc), len(known), pseudo)
        g = np.full((n, 4), np.nan)
        g[gidx >= 0] = gb[gidx[gidx >= 0]]
        labels.append(lab)
        gt_boxes.append(g)
        image_ids.append(np.full(n, i))
        start += n
    labels = np.concatenate(labels)
    batch = ProposalBatch(raw, boxes, labels, np.vstack(gt_boxes),
                          tag_origin(labels, params.num_prev), np.concatenate(image_ids))
    return batch, out


def _run_phase(world, scene_pool, task, params, frame, weights, pseudo, cfg, rng, steps,
               replay, phase, log_rows):
    for step in range(steps):
        pick = rng.integers(0, len(scene_pool), size=cfg.batch_scenes)
        scenes = [scene_pool[i] for i in pick]
        batch, out = build_batch(world, scenes, task, params, frame, pseudo, cfg.eus_enabled)
        res = total_loss(batch, frame, params, weights, replay_active=replay, out=out)
        if not np.isfinite(res.total):
            raise DivergenceError(f"non-finite loss at task {task} {phase} step {step}")
        params = params.step(res.grads, cfg.lr)
        if step % cfg.log_every == 0 or step == steps - 1:
            log_rows.append({"task": task, "phase": phase, "step": step,
                             **res.terms, "total": res.total})
    return params


def train_task(world: World, task: int, params: HeadParams, frame: EtfFrame,
               weights: LossWeights, cfg: TrainConfig, pseudo: PseudoConfig,
               store: ExemplarStore):
    """Train one task: fresh-data phase, exemplar update, then replay for ``task > 1``.

    Returns ``(params, store, log_rows)``. Disabled EUS/EKD are realized by
    zeroing their weights.
    """
    weights = LossWeights(**{**weights.__dict__,
                             "w_eus": weights.w_eus if cfg.eus_enabled else 0.0,
                             "w_ekd": weights.w_ekd if cfg.ekd_enabled else 0.0})
    seed = world.config.seed
    if task > 1:
        params = params.add_task(np.random.default_rng([seed, 5, task]),
                                 world.config.classes_per_task)
    log_rows = []
    rng = np.random.default_rng([seed, 3, task, 0])
    params = _run_phase(world, world.train_scenes[task - 1], task, params, frame, weights,
                        pseudo, cfg, rng, cfg.steps, False, "fresh", log_rows)
    store = update_exemplars(store, world, task)
    if task > 1 and cfg.replay_steps > 0:
        pool = [world.train_scenes[t - 1][i] for t, i in store.scene_keys()]
        rng = np.random.default_rng([seed, 3, task, 1])
        params = _run_phase(world, pool, task, params, frame, weights, pseudo, cfg, rng,
                            cfg.replay_steps, True, "replay", log_rows)
    return params, store, log_rows


def init_params(world: World, frame: EtfFrame, cfg: TrainConfig) -> HeadParams:
    rng = np.random.default_rng([world.config.seed, 4])
    return HeadParams.init(rng, world.config.d_in, frame.feature_dim,
                           world.config.classes_per_task, feat_scale=cfg.feat_scale)
