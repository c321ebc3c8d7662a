"""End-to-end fitting loop with scheduled error-guided densification."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..density_control import AdcConfig, DensityState, densify_step, region_counts
from ..error_metrics import (LAMBDA1, LAMBDA2, build_sat, fused_error_map, gaussian_avg_error, offset_reg, psnr,
                             rgb_loss_grad, tracker_update)
from ..errors import ValidationError
from ..mesh_binding import TriangleFrame, binding_regularizer_grad_mu, binding_regularizers, lbs_deform, mesh_frames
from ..splat_core import GaussianSet, activate_offsets, compose_parameters, identity_offsets
from ..splatter import Camera, load_camera, project_backward, render, render_backward, save_png
from ..temporal_clustering import (DEFAULT_WEIGHTS, ClusterPlan, Epoch, TrainingSchedule, cluster_frames,
                                   make_schedule, make_shuffled_schedule)
from ..uv_atlas import OffsetMap, load_offset_map, sample_offset_map
from .scenes import Scene, build_scene

LAMBDA_POS = 0.01
LAMBDA_SCALE = 1.0
OPACITY_EPS = 1e-6


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class StepSizes:
    mu: float = 1.6e-4  # multiplied by the scene extent
    color: float = 2.5e-3
    opacity: float = 5e-2  # on the opacity logit


@dataclass
class ClusteringConfig:
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    k_min: int = 5
    k_max: int = 12
    N: int = 6
    M: int = 1
    var_keep: float = 0.95


@dataclass
class ExperimentConfig:
    """Everything one run of :func:`fit` needs.

    ``schedule`` is ``"ftc"`` (cluster-ordered), ``"shuffled"`` (the
    interval-matched baseline) or ``"single"`` (``iterations`` steps on the
    first frame, densifying during the first ``adc_until`` fraction).
    ``warmup_epochs`` prepends shuffled passes over all frames without
    densification; they are identical for the ftc and shuffled schedules.
    """

    scene: dict = field(default_factory=lambda: {"generator": "toy"})
    camera: str | None = None
    frames: int | None = None
    schedule: str = "ftc"
    iterations: int = 2000
    adc_enabled: bool = True
    adc_until: float = 0.5
    warmup_epochs: int = 0
    adc: AdcConfig = field(default_factory=AdcConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    optimizer: str = "adam"
    steps: StepSizes = field(default_factory=StepSizes)
    lambda_pos: float = LAMBDA_POS
    lambda_scale: float = LAMBDA_SCALE
    offset_map: str | None = None
    seed: int = 0
    out: str | None = None
    snapshots: bool = True
    base_dir: str | None = None  # relative scene/camera paths resolve against this

    def __post_init__(self) -> None:
        if isinstance(self.adc, dict):
            self.adc = AdcConfig(**self.adc)
        if isinstance(self.clustering, dict):
            c = dict(self.clustering)
            if "weights" in c:
                c["weights"] = tuple(c["weights"])
            self.clustering = ClusteringConfig(**c)
        if isinstance(self.steps, dict):
            self.steps = StepSizes(**self.steps)
        if self.schedule not in ("ftc", "shuffled", "single"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adam", "gd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.warmup_epochs < 0:
            raise ValidationError("warmup_epochs must be >= 0")
        if not 0.0 <= self.adc_until <= 1.0:
            raise ValidationError("adc_until must lie in [0, 1]")
        for p in (self.camera, self.offset_map):
            if p is not None and not self._resolve(p).exists():
                raise ValidationError(f"path not found: {self._resolve(p)}")

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() or self.base_dir is None else Path(self.base_dir) / path

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        d.setdefault("base_dir", str(path.parent))
        return cls.from_dict(d)


@dataclass
class ExperimentReport:
    config: dict
    epochs: list[dict] = field(default_factory=list)  # epoch, phase, adc, iterations, loss, psnr
    events: list[dict] = field(default_factory=list)  # DensifyReport records
    initial_psnr: float = 0.0
    final_psnr: float = 0.0
    final_total: int = 0
    final_region_counts: dict[str, int] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    cluster_plan: dict | None = None
    schedule: dict | None = None
    gaussians: GaussianSet | None = field(default=None, repr=False, compare=False)  # final set, not serialized

    def to_dict(self) -> dict:
        d = asdict(replace(self, gaussians=None))
        d.pop("gaussians")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def save(self, out: str | Path) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "phase", "adc", "iterations", "loss", "psnr"])
            for e in self.epochs:
                w.writerow([e["epoch"], e["phase"], int(e["adc"]), e["iterations"], f"{e['loss']:.8g}",
                            f"{e['psnr']:.6f}"])


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class Optimizer:
    """Per-group first-order updates (plain gradient descent or Adam)."""

    def __init__(self, kind: str, lrs: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-15):
        self.kind = kind
        self.lrs = lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            lr = self.lrs[name]
            if self.kind == "gd":
                params[name] -= lr * g
                continue
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[name] -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def remap(self, parents: np.ndarray, born: np.ndarray) -> None:
        """Carry moments over a densification: inherited rows keep theirs, new rows start at zero."""
        for store in (self.m, self.v):
            for name, arr in store.items():
                new = arr[parents]
                new[born] = 0.0
                store[name] = new


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, OPACITY_EPS, 1.0 - OPACITY_EPS)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def build_training_schedule(cfg: ExperimentConfig, scene: Scene) -> tuple[TrainingSchedule, ClusterPlan | None]:
    cc = cfg.clustering
    if cfg.schedule == "single":
        chunk = min(cfg.adc.densify_interval, cfg.iterations)
        epochs, done = [], 0
        adc_stop = int(round(cfg.adc_until * cfg.iterations))
        while done < cfg.iterations:
            n = min(chunk, cfg.iterations - done)
            epochs.append(Epoch([scene.frame_ids[0]] * n, done + n <= adc_stop, "single", len(epochs) + 1))
            done += n
        return TrainingSchedule(epochs), None
    rng = np.random.default_rng([cfg.seed, 1])
    warmup = [Epoch([int(f) for f in rng.permutation(scene.frame_ids)], False, "warmup", 0)
              for _ in range(cfg.warmup_epochs)]
    plan = None
    if cfg.schedule == "ftc":
        plan = cluster_frames(scene.frames, cc.weights, cc.var_keep, cc.k_min, cc.k_max, cfg.seed)
        main = make_schedule(plan, cc.N, cc.M, cfg.seed)
    else:
        main = make_shuffled_schedule(scene.frame_ids, cc.N, cc.N - cc.M, cfg.seed)
    return TrainingSchedule(warmup + main.epochs), plan


def frame_tables(scene: Scene) -> dict[int, TriangleFrame]:
    return {f.frame_id: mesh_frames(scene.mesh, f.vertex_positions) for f in scene.frames}


def render_frame(g: GaussianSet, table: TriangleFrame, cam: Camera, offsets: OffsetMap | None = None,
                 retain: bool = False):
    deformed = lbs_deform(g, table)
    bundle = None
    if offsets is not None:
        bundle = activate_offsets(sample_offset_map(offsets, g.uv))
        deformed = compose_parameters(deformed, bundle)
    return render(deformed, cam, retain=retain), deformed, bundle


def evaluate(g: GaussianSet, scene: Scene, tables=None, offsets: OffsetMap | None = None) -> float:
    """Mean PSNR over every frame of the scene."""
    tables = tables or frame_tables(scene)
    vals = [psnr(render_frame(g, tables[f], scene.camera, offsets)[0].image, scene.targets[f])
            for f in scene.frame_ids]
    return float(np.mean(vals))


def _dump_diagnostics(out: Path | None, it: int, frame_id: int, parts: dict, g: GaussianSet) -> Path:
    out = out or Path.cwd()
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"diagnostic_iter_{it}.json"

    def summary(a):
        a = np.asarray(a, dtype=np.float64)
        finite = a[np.isfinite(a)]
        return {"nonfinite": int(a.size - finite.size),
                "min": float(finite.min()) if finite.size else None,
                "max": float(finite.max()) if finite.size else None}

    path.write_text(json.dumps({
        "iteration": it, "frame_id": frame_id, "loss_terms": {k: float(v) for k, v in parts.items()},
        "n_gaussians": len(g),
        "params": {k: summary(getattr(g, k)) for k in ("mu", "scale", "opacity", "color")},
    }, indent=2))
    return path


def fit(cfg: ExperimentConfig, scene: Scene | None = None, hook=None, on_event=None) -> ExperimentReport:
    """Fit the scene's Gaussians under the configured schedule.

    ``hook`` is an optional perceptual term ``hook(rendered, target)``; it is
    active from pass floor(N/2) + 1 onward. ``on_event(state, report)`` is
    called before each densification event is applied, with the state whose
    statistics drive it and the event's report.
    """
    t_start = time.perf_counter()
    timings = {"render": 0.0, "backward": 0.0, "error": 0.0, "densify": 0.0, "cluster": 0.0}
    if scene is None:
        spec = dict(cfg.scene)
        if cfg.frames is not None and spec.get("generator") == "occlusion":
            spec["frames"] = cfg.frames
        scene = build_scene(spec, Path(cfg.base_dir) if cfg.base_dir else None)
    if cfg.camera is not None:
        scene.camera = load_camera(cfg._resolve(cfg.camera))
    offsets = load_offset_map(cfg._resolve(cfg.offset_map)) if cfg.offset_map else None
    out = Path(cfg.out) if cfg.out else None
    cam = scene.camera
    tables = frame_tables(scene)
    canon = mesh_frames(scene.mesh)
    extent = scene.scene_extent

    t0 = time.perf_counter()
    schedule, plan = build_training_schedule(cfg, scene)
    timings["cluster"] = time.perf_counter() - t0

    state = DensityState.fresh(scene.init.copy())
    params = {"mu": state.gaussians.mu.copy(), "color": state.gaussians.color.copy(),
              "logit": _logit(state.gaussians.opacity)}
    lrs = {"mu": cfg.steps.mu * extent, "color": cfg.steps.color, "logit": cfg.steps.opacity}
    opt = Optimizer(cfg.optimizer, lrs)
    seeds = np.random.default_rng(cfg.seed)
    half = cfg.clustering.N // 2 + 1

    report = ExperimentReport(cfg.to_dict(), cluster_plan=plan.to_dict() if plan else None,
                              schedule=schedule.to_dict())
    report.initial_psnr = evaluate(state.gaussians, scene, tables, offsets)

    epoch_loss: dict[int, list[float]] = {}
    epoch_psnr: dict[int, list[float]] = {}
    adc_count = 0
    for it, (e, ep, fid) in enumerate(schedule.iterations()):
        g = state.gaussians
        g.mu, g.color, g.opacity = params["mu"], params["color"], _sigmoid(params["logit"])
        table = tables[fid]
        target = scene.targets[fid]

        t0 = time.perf_counter()
        rendered, deformed, bundle = render_frame(g, table, cam, offsets, retain=True)
        timings["render"] += time.perf_counter() - t0

        gamma = 1.0 if hook is not None and ep.pass_index >= half else 0.0
        loss_rgb, grad_img = rgb_loss_grad(rendered.image, target, LAMBDA1, LAMBDA2, gamma, hook)
        reg_pos, reg_scale = binding_regularizers(g)
        reg_off = offset_reg(bundle) if bundle is not None else 0.0
        loss = loss_rgb + reg_off + cfg.lambda_pos * reg_pos + cfg.lambda_scale * reg_scale
        if not np.isfinite(loss):
            path = _dump_diagnostics(out, it, fid, {"rgb": loss_rgb, "offset": reg_off, "pos": reg_pos,
                                                    "scale": reg_scale}, g)
            raise NonFiniteLossError(f"non-finite loss at iteration {it} (frame {fid}); diagnostics in {path}")

        t0 = time.perf_counter()
        grads = render_backward(rendered, grad_img)
        state.grad_accum += rendered.stats.pos_grad_accum
        state.grad_count += rendered.stats.accum_count
        g_world = project_backward(grads.mean2d, deformed, cam)
        r, k = table.r[g.face_id], table.k[g.face_id]
        g_mu = k[:, None] * np.einsum("nji,nj->ni", r, g_world)
        g_mu += cfg.lambda_pos * binding_regularizer_grad_mu(g.mu)
        g_color, g_opacity = grads.color, grads.opacity
        if bundle is not None:
            # Clamped compositions pass no gradient.
            g_color = g_color * ((deformed.color > 0) & (deformed.color < 1))
            g_opacity = g_opacity * ((deformed.opacity > 0) & (deformed.opacity < 1))
        g_logit = g_opacity * g.opacity * (1.0 - g.opacity)
        opt.step(params, {"mu": g_mu, "color": g_color, "logit": g_logit})
        np.clip(params["color"], 0.0, 1.0, out=params["color"])
        timings["backward"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        ef = build_sat(fused_error_map(rendered.image, target))
        state.tracker = tracker_update(state.tracker, gaussian_avg_error(rendered.stats, ef))
        timings["error"] += time.perf_counter() - t0

        epoch_loss.setdefault(e, []).append(loss)
        epoch_psnr.setdefault(e, []).append(psnr(rendered.image, target))

        if ep.adc_enabled and cfg.adc_enabled:
            adc_count += 1
            if adc_count % cfg.adc.densify_interval == 0:
                t0 = time.perf_counter()
                g.mu, g.color, g.opacity = params["mu"], params["color"], _sigmoid(params["logit"])
                world_max = canon.k[g.face_id] * g.scale.max(axis=1)
                before = state
                state, rep = densify_step(state, cfg.adc, scene.atlas, scene.mesh,
                                          int(seeds.integers(2 ** 31)), extent, world_max, iteration=it)
                if on_event is not None:
                    on_event(before, rep)
                params = {"mu": state.gaussians.mu.copy(), "color": state.gaussians.color.copy(),
                          "logit": params["logit"][state.parents]}
                opt.remap(state.parents, state.born)
                report.events.append(rep.to_dict())
                if out is not None and cfg.snapshots:
                    out.mkdir(parents=True, exist_ok=True)
                    snap = render_frame(state.gaussians, table, cam, offsets)[0].image
                    save_png(snap, out / f"epoch_{e}_iter_{it}.png")
                timings["densify"] += time.perf_counter() - t0

    g = state.gaussians
    g.mu, g.color, g.opacity = params["mu"], params["color"], _sigmoid(params["logit"])
    for e, ep in enumerate(schedule.epochs):
        if e in epoch_loss:
            report.epochs.append({"epoch": e, "phase": ep.phase, "adc": bool(ep.adc_enabled and cfg.adc_enabled),
                                  "iterations": len(epoch_loss[e]), "loss": float(np.mean(epoch_loss[e])),
                                  "psnr": float(np.mean(epoch_psnr[e]))})
    report.final_psnr = evaluate(g, scene, tables, offsets)
    report.final_total = len(g)
    report.final_region_counts = region_counts(g.uv, scene.atlas)
    timings["total"] = time.perf_counter() - t_start
    report.timings = timings
    report.gaussians = g
    if out is not None:
        report.save(out)
        (out / "gaussians.json").write_text(json.dumps(g.to_dict()))
    return report

