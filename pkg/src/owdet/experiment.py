"""Experiment configuration and orchestration: single runs, the 2x2 ablation grid, sweeps.

Configs are sectioned INI files. ``defaults.ini`` ships with the package and
is always read first, so a user file only needs the keys it changes.
"""

import configparser
import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .etf import build_simplex_etf
from .evaluate import EvalReport, evaluate_task, pca_project
from .losses import LossWeights
from .matching import PseudoConfig
from .sim import ExemplarStore, TrainConfig, WorldConfig, generate_world, init_params, train_task

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("task", "previous_map", "current_map", "known_map", "u_recall", "h_score")
LOG_COLUMNS = ("task", "phase", "step", "cls", "l1", "giou", "energy", "subspace", "ekd", "total")
SWEEP_AXES = {"m": ("losses", "margin", float), "k": ("frame", "k", int)}


class ConfigError(ValueError):
    """Raised for unreadable, malformed or inconsistent configuration."""


@dataclass(frozen=True)
class FrameConfig:
    k: int = 128
    d: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.k < 2 or self.k % 2:
            raise ValueError("frame k must be even and >= 2")
        if self.d < self.k:
            raise ValueError("frame d must be >= k")


@dataclass(frozen=True)
class InferenceConfig:
    score_threshold: float = 0.10
    nms_iou: float = 0.6


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    frame: FrameConfig = field(default_factory=FrameConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    out_dir: str = "runs/default"

    @property
    def seed(self) -> int:
        return self.world.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, world=replace(self.world, seed=int(seed)))

    def with_flags(self, eus: bool, ekd: bool) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, eus_enabled=eus, ekd_enabled=ekd))

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def hash(self) -> str:
        """SHA-256 of the canonical config (output directory excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


# INI section -> (ExperimentConfig attribute, dataclass). Ablation flags live
# in their own section but are stored on TrainConfig.
_SECTIONS = {
    "world": WorldConfig,
    "frame": FrameConfig,
    "losses": LossWeights,
    "pseudo": PseudoConfig,
    "train": TrainConfig,
    "inference": InferenceConfig,
}
_ABLATION_KEYS = ("eus_enabled", "ekd_enabled")


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(","))
    return raw


def _apply(parser: configparser.ConfigParser, source: str) -> dict:
    """Turn parsed INI sections into per-section override dicts."""
    known = set(_SECTIONS) | {"ablation", "output"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"{source}: unknown section(s) {sorted(extra)}")
    overrides = {name: {} for name in _SECTIONS}
    for name, klass in _SECTIONS.items():
        defaults = {f.name: getattr(klass(), f.name) for f in fields(klass)}
        if not parser.has_section(name):
            continue
        for key, raw in parser.items(name):
            if key not in defaults or (name == "train" and key in _ABLATION_KEYS):
                raise ConfigError(f"{source}: unknown key [{name}] {key}")
            try:
                overrides[name][key] = _parse_value(raw, defaults[key])
            except ValueError as exc:
                raise ConfigError(f"{source}: [{name}] {key}: {exc}") from None
    if parser.has_section("ablation"):
        for key, raw in parser.items("ablation"):
            if key not in _ABLATION_KEYS:
                raise ConfigError(f"{source}: unknown key [ablation] {key}")
            try:
                overrides["train"][key] = _parse_value(raw, True)
            except ValueError as exc:
                raise ConfigError(f"{source}: [ablation] {key}: {exc}") from None
    if parser.has_section("output"):
        for key, raw in parser.items("output"):
            if key != "dir":
                raise ConfigError(f"{source}: unknown key [output] {key}")
            overrides["out_dir"] = raw.strip()
    return overrides


def _build(overrides: dict, base: ExperimentConfig) -> ExperimentConfig:
    parts = {}
    try:
        for name in _SECTIONS:
            parts[name] = replace(getattr(base, name), **overrides.get(name, {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(**parts, out_dir=overrides.get("out_dir", base.out_dir))


def defaults_text() -> str:
    return resources.files("owdet").joinpath("defaults.ini").read_text()


def parse_config(text: str, base: ExperimentConfig | None = None,
                 source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return _build(_apply(parser, source), base if base is not None else ExperimentConfig())


def default_config() -> ExperimentConfig:
    """The shipped defaults, read from ``defaults.ini``."""
    return parse_config(defaults_text(), source="defaults.ini")


def load_config(path=None) -> ExperimentConfig:
    """Defaults overlaid with the INI file at ``path`` (if any)."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base=cfg, source=str(path))


@dataclass
class RunResult:
    config: ExperimentConfig
    reports: list
    log_rows: list
    detections: list = field(default_factory=list, repr=False)
    projections: list = field(default_factory=list, repr=False)


def run_experiment(cfg: ExperimentConfig, out_dir=None, keep_outputs: bool = True) -> RunResult:
    """Train over every task, evaluating after each; optionally write artifacts.

    Raises ``sim.DivergenceError`` if the loss stops being finite.
    """
    world = generate_world(cfg.world)
    frame = build_simplex_etf(cfg.frame.k, cfg.frame.d, cfg.frame.seed)
    params = init_params(world, frame, cfg.train)
    store = ExemplarStore()
    reports, logs, dets, projs = [], [], [], []
    for t in range(1, cfg.world.num_tasks + 1):
        params, store, rows = train_task(world, t, params, frame, cfg.losses, cfg.train,
                                         cfg.pseudo, store)
        logs.extend(rows)
        report, d, feats, labels = evaluate_task(
            params, frame, world.test_scenes, t, world.class_task,
            calibrate=cfg.train.eus_enabled,
            score_threshold=cfg.inference.score_threshold,
            nms_iou=cfg.inference.nms_iou,
            iou_threshold=cfg.pseudo.iou_match_threshold)
        reports.append(report)
        log.info("task %d: known mAP %.1f, U-Rec %.1f", t, report.known_map, report.u_recall)
        if keep_outputs or out_dir is not None:
            dets.append(d)
            projs.append((pca_project(feats), labels))
    result = RunResult(cfg, reports, logs, dets, projs)
    if out_dir is not None:
        write_run(result, out_dir, frame.basis)
    return result


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def summary_rows(reports) -> list:
    return [[getattr(r, c) for c in SUMMARY_COLUMNS] for r in reports]


def format_summary(reports) -> str:
    """Plain-text per-task table: Previous/Current/Known mAP, U-Rec, H-Score."""
    head = f"{'task':>4} {'prev mAP':>9} {'curr mAP':>9} {'known mAP':>9} {'U-Rec':>7} {'H':>7}"
    lines = [head]
    for r in reports:
        prev = "-" if r.previous_map is None else f"{r.previous_map:.1f}"
        urec = f"{r.u_recall:.1f}" if r.u_recall_defined else "-"
        lines.append(f"{r.task:>4} {prev:>9} {r.current_map:>9.1f} {r.known_map:>9.1f} "
                     f"{urec:>7} {r.h_score:>7.1f}")
    return "\n".join(lines)


def _write(path: Path, text: str, files: dict):
    path.write_text(text)
    files[path.name] = hashlib.sha256(text.encode()).hexdigest()


def write_run(result: RunResult, out_dir, frame_basis=None) -> Path:
    """Write reports, CSV tables, detections, projections and a manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = {}
    for r in result.reports:
        t = r.task
        _write(out / f"report_task{t}.json", r.to_json(), files)
        n = len(r.heatmap)
        _write(out / f"heatmap_task{t}.csv",
               _csv_text(["task"] + [f"head{j + 1}" for j in range(n)],
                         [[i + 1, *row] for i, row in enumerate(r.heatmap)]), files)
        _write(out / f"class_scores_task{t}.csv",
               _csv_text(["class_id", "s_known", "s_unknown", "count"],
                         [[c, *v] for c, v in sorted(r.per_class_scores.items())]), files)
    for t, d in enumerate(result.detections, start=1):
        _write(out / f"detections_task{t}.jsonl", d.to_jsonl(), files)
    for t, (xy, labels) in enumerate(result.projections, start=1):
        _write(out / f"pca_task{t}.csv",
               _csv_text(["x", "y", "label"], [[x, y, lab] for (x, y), lab in zip(xy, labels)]),
               files)
    _write(out / "train_log.csv",
           _csv_text(LOG_COLUMNS, [[row.get(c) for c in LOG_COLUMNS] for row in result.log_rows]),
           files)
    _write(out / "summary.csv", _csv_text(SUMMARY_COLUMNS, summary_rows(result.reports)), files)
    if frame_basis is not None:
        buf = io.BytesIO()
        np.save(buf, np.asarray(frame_basis))
        (out / "frame.npy").write_bytes(buf.getvalue())
        files["frame.npy"] = hashlib.sha256(buf.getvalue()).hexdigest()
    manifest = {"config_hash": result.config.hash(), "seed": result.config.seed,
                "config": result.config.to_dict(), "files": dict(sorted(files.items()))}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                  default=list) + "\n")
    return out


def _cell_name(eus: bool, ekd: bool) -> str:
    return f"eus{'on' if eus else 'off'}_ekd{'on' if ekd else 'off'}"


def _run_cell(args):
    cfg, out_dir, keep = args
    return run_experiment(cfg, out_dir, keep_outputs=keep)


def _map_runs(jobs, parallel: int):
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


ABLATION_COLUMNS = ("eus", "ekd") + SUMMARY_COLUMNS


def run_ablation(cfg: ExperimentConfig, out_dir=None, parallel: int = 1,
                 keep_outputs: bool = False) -> dict:
    """The 2x2 EUS x EKD grid on one seed; returns ``{(eus, ekd): RunResult}``."""
    cells = [(e, k) for e in (True, False) for k in (True, False)]
    jobs = [(cfg.with_flags(e, k),
             None if out_dir is None else str(Path(out_dir) / _cell_name(e, k)), keep_outputs)
            for e, k in cells]
    results = dict(zip(cells, _map_runs(jobs, parallel)))
    if out_dir is not None:
        rows = [[int(e), int(k), *row] for (e, k), res in results.items()
                for row in summary_rows(res.reports)]
        Path(out_dir, "ablation.csv").write_text(_csv_text(ABLATION_COLUMNS, rows))
    return results


def parse_sweep(text: str):
    """``"m=0.25,0.5,1.0"`` -> ``("m", [0.25, 0.5, 1.0])``."""
    name, sep, values = text.partition("=")
    name = name.strip().lower()
    if not sep or name not in SWEEP_AXES:
        raise ConfigError(f"sweep must look like m=... or k=..., got {text!r}")
    conv = SWEEP_AXES[name][2]
    try:
        vals = [conv(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad sweep values in {text!r}") from None
    if not vals:
        raise ConfigError(f"no sweep values in {text!r}")
    return name, vals


def sweep_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    section, key, _ = SWEEP_AXES[axis]
    try:
        return replace(cfg, **{section: replace(getattr(cfg, section), **{key: value})})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run_sweep(cfg: ExperimentConfig, axis: str, values, out_dir=None,
              parallel: int = 1) -> dict:
    """One full run per sweep value (flags as configured); returns ``{value: RunResult}``."""
    cfgs = [sweep_config(cfg, axis, v) for v in values]
    jobs = [(c, None if out_dir is None else str(Path(out_dir) / f"{axis}={v}"), False)
            for c, v in zip(cfgs, values)]
    results = dict(zip(values, _map_runs(jobs, parallel)))
    if out_dir is not None:
        rows = [[v, *row] for v, res in results.items() for row in summary_rows(res.reports)]
        Path(out_dir, "sweep.csv").write_text(_csv_text((axis,) + SUMMARY_COLUMNS, rows))
    return results


__all__ = [
    "ConfigError", "FrameConfig", "InferenceConfig", "ExperimentConfig", "RunResult",
    "EvalReport", "default_config", "load_config", "parse_config", "run_experiment",
    "write_run", "run_ablation", "run_sweep", "parse_sweep", "format_summary",
]
