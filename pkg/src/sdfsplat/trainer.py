"""Optimisation: Adam, schedule gates, densification and the training loop."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses as L
from .camera import Camera
from .gaussians import (GaussianCloud, gamma_median, median_loss, rotmat_grad_to_quat,
                        sdf_to_opacity, spherical_init, unsigned_distance_median)
from .projection import projection_loss, projection_residuals
from .raster import DISTORTION_FORMS, CloudGrad, normal_from_depth, normal_from_depth_adjoint, rasterize, rasterize_adjoint
from .shading import EnvironmentLight, shade_adjoint, shade_deferred

log = logging.getLogger(__name__)


class NumericalFailure(FloatingPointError):
    """A loss term or parameter became non-finite."""


@dataclass
class TrainConfig:
    iterations: int = 30000
    seed: int = 0
    # learning rates; the position rate is multiplied by the scene extent
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    position_lr_max_steps: int = 30000  # decay horizon, independent of run length
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_albedo: float = 2.5e-3
    lr_roughness: float = 5e-3
    lr_metallic: float = 5e-3
    lr_sdf: float = 0.05
    lr_log_gamma: float = 1e-3
    lr_environment: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    # schedule gates
    median_gate: float = 0.2
    projection_warmup: int = 1000
    # depth distortion and normal consistency start once the colour fit has
    # settled, as in the surfel baseline this method builds on
    distortion_start: int = 3000
    normal_start: int = 7000
    distortion_form: str = "ndc-sq"  # see rasterize()
    epsilon: float = 0.05
    # densification
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int = 15000
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    max_primitives: int = 200000
    # initialisation
    init_count: int = 20000
    init_radius: float = 1.0
    init_gamma: float = 10.0
    # T_gamma has a flat maximum at s = 0, so an all-zero start has no SDF
    # gradient; a small positive value (primitives start outside) breaks that
    init_sdf: float = 0.01
    env_resolution: int = 64
    env_init: float = 0.5
    learn_environment: bool = True
    scene_extent: float = 0.0  # 0 = derive from the training cameras
    # shading
    printed_split_sum: bool = False
    # output
    checkpoint_interval: int = 5000
    # loss weights
    weight_color: float = 1.0
    weight_normal: float = 0.2
    weight_distortion: float = 2000.0
    weight_median: float = 1.0
    weight_projection: float = 10.0
    weight_smoothness: float = 0.05
    weight_mask: float = 0.2
    ssim_mix: float = 0.8

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")
        if self.iterations < 0 or self.projection_warmup < 0:
            raise ValueError("iterations and projection_warmup must be non-negative")
        if self.distortion_form not in DISTORTION_FORMS:
            raise ValueError(f"distortion_form must be one of {DISTORTION_FORMS}")
        self.weights  # validates non-negativity

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.weight_color, self.weight_normal, self.weight_distortion,
                             self.weight_median, self.weight_projection, self.weight_smoothness,
                             self.weight_mask, self.ssim_mix)

    # --- key = value files ---------------------------------------------------
    @classmethod
    def field_types(cls) -> dict:
        return {f.name: type(f.default) for f in fields(cls)}

    @classmethod
    def from_mapping(cls, mapping: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        types = cls.field_types()
        kw = dataclasses.asdict(base) if base is not None else {}
        for key, raw in mapping.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise KeyError(f"unknown config key '{key}'")
            kw[key] = _parse_value(raw, types[key], key)
        return cls(**kw)

    @classmethod
    def from_file(cls, path, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), base)

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        cp.optionxform = str
        cp.read_string("[train]\n" + text)
        return cls.from_mapping(dict(cp["train"]), base)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())


def _parse_value(raw, typ, key):
    if not isinstance(raw, str):
        return typ(raw)
    s = raw.strip()
    try:
        if typ is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if typ is int:
            try:
                return int(s)
            except ValueError:
                x = float(s)  # accept forms such as 3e3
                if not x.is_integer():
                    raise
                return int(x)
        return typ(s)
    except ValueError:
        raise ValueError(f"config key '{key}' expects {typ.__name__}, got {raw!r}") from None


def desk_config(**overrides) -> TrainConfig:
    """Schedule for the 3000-iteration desk-scale scene: regularizer starts are
    scaled to a tenth, densification stops at half of training."""
    base = dict(iterations=3000, densify_stop=1500, checkpoint_interval=5000, init_count=20000,
                distortion_start=300, normal_start=700)
    base.update(overrides)
    return TrainConfig(**base)


# --- Adam ------------------------------------------------------------------------

@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray


def adam_update(param, grad, moments: AdamMoments, lr: float, step: int, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-15):
    """One bias-corrected Adam step (step counts from 1). Returns the new
    parameter array; moments are updated in place."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or moments.m.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, "
                         f"moments {moments.m.shape}")
    moments.m *= beta1
    moments.m += (1.0 - beta1) * grad
    moments.v *= beta2
    moments.v += (1.0 - beta2) * grad * grad
    mhat = moments.m / (1.0 - beta1**step)
    vhat = moments.v / (1.0 - beta2**step)
    return param - lr * mhat / (np.sqrt(vhat) + eps)


PARAMS = ("positions", "rotations", "log_scales", "sdf_values", "albedo_logit",
          "roughness_logit", "metallic_logit", "log_gamma", "environment")
PER_PRIMITIVE = PARAMS[:7]


@dataclass
class TrainState:
    iteration: int = 0
    moments: dict = field(default_factory=dict)
    median_active: bool = True
    projection_active: bool = False
    grad_accum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_count: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rng_state: dict | None = None

    @classmethod
    def fresh(cls, cloud: GaussianCloud, env: EnvironmentLight, seed: int) -> "TrainState":
        st = cls(rng_state=np.random.default_rng(seed).bit_generator.state)
        for name in PER_PRIMITIVE:
            shape = getattr(cloud, name).shape
            st.moments[name] = AdamMoments(np.zeros(shape), np.zeros(shape))
        st.moments["log_gamma"] = AdamMoments(np.zeros(()), np.zeros(()))
        st.moments["environment"] = AdamMoments(np.zeros(env.radiance.shape),
                                                np.zeros(env.radiance.shape))
        st.grad_accum = np.zeros(len(cloud))
        st.grad_count = np.zeros(len(cloud))
        return st

    def check_consistent(self, cloud: GaussianCloud) -> None:
        for name in PER_PRIMITIVE:
            for arr in (self.moments[name].m, self.moments[name].v):
                if arr.shape != getattr(cloud, name).shape:
                    raise AssertionError(f"optimizer moments for {name} have shape {arr.shape}, "
                                         f"parameters {getattr(cloud, name).shape}")
        if self.grad_accum.shape != (len(cloud),) or self.grad_count.shape != (len(cloud),):
            raise AssertionError("densification accumulators out of sync with the cloud")


def position_lr(config: TrainConfig, iteration: int, extent: float) -> float:
    """Log-linear decay from lr_position to lr_position_final over
    position_lr_max_steps iterations (held at the final rate afterwards)."""
    t = min(max(iteration / max(config.position_lr_max_steps, 1), 0.0), 1.0)
    lr = math.exp((1.0 - t) * math.log(config.lr_position) + t * math.log(config.lr_position_final))
    return lr * extent


def scene_extent(cameras: list[Camera]) -> float:
    """3DGS convention: 1.1 x the largest camera distance from their mean."""
    c = np.stack([cam.center for cam in cameras])
    return 1.1 * float(np.linalg.norm(c - c.mean(0), axis=1).max())


# --- densification ---------------------------------------------------------------

def densify_and_prune(cloud: GaussianCloud, state: TrainState, config: TrainConfig,
                      extent: float) -> tuple[GaussianCloud, dict]:
    """Clone small / split large primitives whose mean screen-space position
    gradient exceeds the threshold, then remove primitives whose derived
    opacity fell below the prune threshold. Returns the new cloud and a
    summary of what happened."""
    n = len(cloud)
    mean_grad = np.where(state.grad_count > 0, state.grad_accum / np.maximum(state.grad_count, 1), 0.0)
    hot = mean_grad > config.densify_grad_threshold
    big = cloud.scales.max(1) > config.percent_dense * extent
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)
    info = {"cloned": 0, "split": 0, "pruned": 0, "skipped": False}
    if n + len(clone) + len(split) > config.max_primitives:
        log.warning("densification skipped: %d primitives would exceed max_primitives=%d",
                    n + len(clone) + len(split), config.max_primitives)
        clone = split = np.zeros(0, dtype=np.int64)
        info["skipped"] = True

    arrays = {name: getattr(cloud, name) for name in GaussianCloud.ARRAY_FIELDS}
    # split: the parent becomes one child, a new entry the other
    if len(split):
        R = cloud.rotation_matrices[split]
        sc = cloud.scales[split]
        major = np.argmax(sc, axis=1)
        axis = R[np.arange(len(split)), :, major]
        off = 0.8 * sc[np.arange(len(split)), major][:, None] * axis
        pos = arrays["positions"].copy()
        pos[split] += off
        arrays["positions"] = pos
        ls = arrays["log_scales"].copy()
        ls[split] -= math.log(1.6)
        arrays["log_scales"] = ls
    parents = np.concatenate([clone, split])
    extra = {name: arr[parents].copy() for name, arr in arrays.items()}
    if len(split):
        extra["positions"][len(clone):] -= 2.0 * off
    merged = {name: np.concatenate([arrays[name], extra[name]]) for name in arrays}
    moments = {}
    for name in PER_PRIMITIVE:
        mo = state.moments[name]
        pad = np.zeros((len(parents),) + mo.m.shape[1:])
        moments[name] = AdamMoments(np.concatenate([mo.m, pad]), np.concatenate([mo.v, pad]))

    opacity = sdf_to_opacity(merged["sdf_values"], cloud.gamma)
    keep = np.flatnonzero(np.asarray(opacity).reshape(-1) >= config.prune_opacity)
    info.update(cloned=len(clone), split=len(split), pruned=len(merged["sdf_values"]) - len(keep))
    new = GaussianCloud(log_gamma=cloud.log_gamma, **{k: v[keep] for k, v in merged.items()})
    for name in PER_PRIMITIVE:
        state.moments[name] = AdamMoments(moments[name].m[keep], moments[name].v[keep])
    state.grad_accum = np.zeros(len(new))
    state.grad_count = np.zeros(len(new))
    new.check_invariants()
    state.check_consistent(new)
    return new, info


# --- one step ----------------------------------------------------------------------

@dataclass
class View:
    """Training target: display-space RGB in [0, 1], foreground mask, camera."""
    image: np.ndarray
    mask: np.ndarray
    camera: Camera
    name: str = ""


def _chain_params(cloud: GaussianCloud, g: CloudGrad) -> dict:
    """Gradients on activated values -> gradients on the stored parameters."""
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    a = sig(cloud.albedo_logit)
    r = sig(cloud.roughness_logit)
    m = sig(cloud.metallic_logit)
    return {
        "positions": g.positions,
        "rotations": g.rotations,
        "log_scales": g.scales * cloud.scales,
        "sdf_values": g.sdf_values,
        "albedo_logit": g.albedo * a * (1.0 - a),
        "roughness_logit": g.roughness * r * (1.0 - r),
        "metallic_logit": g.metallic * m * (1.0 - m),
        "log_gamma": np.asarray(g.gamma * cloud.gamma),
    }


@dataclass
class StepResult:
    report: L.LossReport
    grads: dict
    render: np.ndarray
    gbuffer: object
    s_med: float


def compute_losses(cloud: GaussianCloud, env: EnvironmentLight, view: View, config: TrainConfig,
                   state: TrainState, iteration: int) -> StepResult:
    """Forward and backward for one view; returns the loss report and the
    parameter gradients (not yet applied)."""
    cam = view.camera
    W = config.weights
    gb = rasterize(cloud, cam, distortion=config.distortion_form)
    lin, cache = shade_deferred(gb, env, cam, printed_form=config.printed_split_sum,
                                return_cache=True)
    render = L.tonemap(lin)
    gt = view.image * view.mask[..., None]
    mask = view.mask

    terms, gates = {}, {}
    up = {k: 0.0 for k in ("albedo", "roughness", "metallic", "normal", "depth", "alpha",
                           "distortion")}
    g_render = np.zeros_like(render)

    if W.color:
        v, g = L.color_loss(render, gt, W.ssim_mix)
        terms["color"] = v
        g_render += W.color * g

    if W.normal and iteration > config.normal_start:
        n_hat, valid = normal_from_depth(gb.depth, gb.alpha, cam)
        n_cam = gb.normal @ cam.rotation.T
        valid = valid & (np.linalg.norm(gb.normal, axis=-1) > 0.5)
        v, g_hat, g_n, _ = L.normal_loss(n_hat, n_cam, valid)
        terms["normal"] = v
        up["normal"] = up["normal"] + W.normal * (g_n @ cam.rotation)
        up["depth"] = up["depth"] + normal_from_depth_adjoint(gb.depth, gb.alpha, cam,
                                                              W.normal * g_hat)

    if W.distortion and iteration > config.distortion_start:
        v, g = L.distortion_loss(gb.distortion, gb.alpha)
        terms["distortion"] = v
        up["distortion"] = up["distortion"] + W.distortion * g

    if W.smoothness:
        v, gs = L.smoothness_loss([gb.albedo, gb.roughness, gb.metallic], gt, mask > 0.5)
        terms["smoothness"] = v
        for k, g in zip(("albedo", "roughness", "metallic"), gs):
            up[k] = up[k] + W.smoothness * g

    if W.mask:
        v, g = L.mask_loss(gb.alpha, mask)
        terms["mask"] = v
        up["alpha"] = up["alpha"] + W.mask * g

    # median loss: gate checked before use and closed for good
    s_med = unsigned_distance_median(cloud.sdf_values)
    if state.median_active and s_med < config.median_gate:
        state.median_active = False
    gates["median"] = state.median_active
    g_log_gamma = 0.0
    if state.median_active:
        v, dg = median_loss(cloud.gamma, gamma_median(s_med))
        terms["median"] = v
        g_log_gamma += W.median * dg * cloud.gamma
    else:
        terms["median"] = 0.0

    if not state.projection_active and iteration > config.projection_warmup:
        state.projection_active = True
    gates["projection"] = state.projection_active
    proj = None
    if state.projection_active and W.projection:
        batch = projection_residuals(cloud, gb, cam)
        v, proj = projection_loss(batch, cam, config.epsilon)
        terms["projection"] = v
        up["depth"] = up["depth"] + W.projection * proj.depth_map
    else:
        terms["projection"] = 0.0

    report = L.total_loss(terms, W, gates)

    # backward: tone map -> shading -> rasterizer
    g_lin = g_render * L.tonemap_grad(lin)
    chans, g_env = shade_adjoint(gb, env, cam, g_lin, cache, printed_form=config.printed_split_sum)
    for k, g in chans.items():
        up[k] = up[k] + g
    cg = rasterize_adjoint(cloud, cam, gb, {k: v for k, v in up.items() if not np.isscalar(v)})
    grads = _chain_params(cloud, cg)
    grads["log_gamma"] = grads["log_gamma"] + g_log_gamma
    if proj is not None and len(proj.index):
        idx = proj.index
        w = W.projection
        grads["positions"][idx] += w * proj.mu
        grads["sdf_values"][idx] += w * proj.s
        dR = np.zeros((len(idx), 3, 3))
        dR[:, :, 2] = w * proj.normal
        grads["rotations"][idx] += rotmat_grad_to_quat(cloud.rotations[idx], dR)
    grads["environment"] = g_env
    grads["_screen"] = cg.screen
    return StepResult(report, grads, render, gb, s_med)


def _lrs(config: TrainConfig, iteration: int, extent: float) -> dict:
    return {
        "positions": position_lr(config, iteration, extent),
        "rotations": config.lr_rotation,
        "log_scales": config.lr_scale,
        "sdf_values": config.lr_sdf,
        "albedo_logit": config.lr_albedo,
        "roughness_logit": config.lr_roughness,
        "metallic_logit": config.lr_metallic,
        "log_gamma": config.lr_log_gamma,
        "environment": config.lr_environment,
    }


def train_step(state: TrainState, cloud: GaussianCloud, env: EnvironmentLight, view: View,
               config: TrainConfig, extent: float = 1.0):
    """One optimisation step on one view. Returns (state, cloud, env, report);
    the cloud and environment are updated in place."""
    it = state.iteration + 1
    res = compute_losses(cloud, env, view, config, state, it)
    rep = res.report
    if not math.isfinite(rep.total):
        raise NumericalFailure(f"total loss is not finite at iteration {it}")
    lrs = _lrs(config, it, extent)
    for name in PARAMS:
        g = res.grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"gradient of {name} is not finite at iteration {it}")
        if name == "environment":
            if not config.learn_environment:
                continue
            env.radiance = np.maximum(adam_update(env.radiance, g, state.moments[name], lrs[name],
                                                  it, config.beta1, config.beta2, config.adam_eps), 0.0)
        elif name == "log_gamma":
            cloud.log_gamma = float(adam_update(np.asarray(cloud.log_gamma), g, state.moments[name],
                                                lrs[name], it, config.beta1, config.beta2,
                                                config.adam_eps))
        else:
            setattr(cloud, name, adam_update(getattr(cloud, name), g, state.moments[name],
                                             lrs[name], it, config.beta1, config.beta2,
                                             config.adam_eps))
    cloud.normalize_rotations()
    if config.learn_environment:
        env.prefilter()
    seen = res.grads["_screen"] > 0
    state.grad_accum[seen] += res.grads["_screen"][seen]
    state.grad_count[seen] += 1
    state.iteration = it
    return state, cloud, env, rep


# --- the loop ------------------------------------------------------------------------

CSV_COLUMNS = (["iteration", "view", "primitives", "gamma", "s_median", "median_active",
                "projection_active"] + [c for t in L.TERMS for c in (t, f"w_{t}")]
               + ["total", "seconds"])


@dataclass
class TrainResult:
    cloud: GaussianCloud
    env: EnvironmentLight
    state: TrainState
    history: list


def initial_model(config: TrainConfig, env_init: np.ndarray | None = None):
    cloud = spherical_init(config.init_count, config.init_radius, config.seed,
                           sdf_value=config.init_sdf, gamma=config.init_gamma)
    if env_init is None:
        env = EnvironmentLight.constant(config.env_resolution, config.env_init)
    else:
        env = EnvironmentLight(np.asarray(env_init, dtype=np.float64))
    env.prefilter()
    return cloud, env


def train(views: list[View], config: TrainConfig, env_init: np.ndarray | None = None,
          csv_path=None, checkpoint_fn: Callable | None = None, progress: Callable | None = None,
          start: tuple | None = None) -> TrainResult:
    """Run the full schedule. `checkpoint_fn(cloud, env, state, final)` is called
    every checkpoint_interval iterations and at the end."""
    if not views:
        raise ValueError("no training views")
    if start is None:
        cloud, env = initial_model(config, env_init)
        state = TrainState.fresh(cloud, env, config.seed)
    else:
        cloud, env, state = start
    extent = config.scene_extent or scene_extent([v.camera for v in views])
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    history = []
    fh = writer = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
    try:
        while state.iteration < config.iterations:
            t0 = time.perf_counter()
            vi = int(rng.integers(len(views)))
            state.rng_state = rng.bit_generator.state
            state, cloud, env, rep = train_step(state, cloud, env, views[vi], config, extent)
            it = state.iteration
            row = {"iteration": it, "view": vi, "primitives": len(cloud), "gamma": cloud.gamma,
                   "s_median": unsigned_distance_median(cloud.sdf_values),
                   "median_active": int(rep.gates["median"]),
                   "projection_active": int(rep.gates["projection"]), **rep.row()}
            if (config.densify_start <= it <= config.densify_stop
                    and it % config.densify_interval == 0):
                cloud, info = densify_and_prune(cloud, state, config, extent)
                log.info("iteration %d: densify %s -> %d primitives", it, info, len(cloud))
            row["seconds"] = time.perf_counter() - t0
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
            if progress is not None:
                progress(row)
            if checkpoint_fn is not None and it % config.checkpoint_interval == 0 \
                    and it != config.iterations:
                checkpoint_fn(cloud, env, state, False)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_fn is not None:
        checkpoint_fn(cloud, env, state, True)
    return TrainResult(cloud, env, state, history)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)
