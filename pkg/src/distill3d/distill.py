"""Test-time optimization engine: SDS, the proxy objective, full VSD,
the combined color+normal objective, weighted concept composition, and
the step loop.

Update directions, with sg() the stop gradient and D / D' the frozen
denoiser and its low-rank proxy:

    SDS:  d/dI omega(t) ||sg(D_cfg) - I||^2        = 2 omega (I - sg D)
    VSD:  d/dI [L_SDS(I) - L_proxy(sg D', I)]      = 2 omega (sg D' - sg D)
    proxy: omega(t) ||D'(noisy I) - sg(I)||^2       (adapters only)

Composition sums per-concept VSD gradients with signed weights under a
shared (epsilon, t) draw.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import gradcore as gc
from .container import load_container, save_container
from .field import FieldParams, save_field, load_field
from .gradcore import backward, constant, mean, sum_
from .optim import clip_global_norm, global_norm, make_optimizer
from .priors import Condition, LoraProxy, add_noise, cfg_denoise, lora_wrap
from .render import RaySamplingSpec, accumulation_penalty, render, view_descriptor

DEFAULT_ITERATION_BUDGET = 1000  # per-concept test-time budget


@dataclass
class DistillConfig:
    lr_nerf: float = 1e-4
    lr_lora: float | None = None          # resolved to 2 * lr_nerf
    cfg_main: float = 3.0
    cfg_proxy: float = 1.0
    lambda_normal: float = 0.5
    lambda_acc: float = 0.01
    t_min: float = 0.02
    t_max: float = 0.8
    omega: str = "one"                    # "one" | "one_minus_alpha_bar"
    iterations: int = 400
    seed: int = 0
    mode: str = "vsd"                     # "vsd" | "sds"
    optimizer: str = "sgd"
    lora_rank: int = 4
    grad_clip: float | None = None        # composed-gradient norm ceiling
    update_ceiling: float = 1.0           # divergence guard threshold
    ceiling_patience: int = 10
    lr_decay_start: int | None = None
    lr_decay_gamma: float = 1.0           # per-step factor after decay start
    anneal_t_max: bool = False            # optional linear anneal, off by default
    latent_only: bool = False
    budget_cap: int = DEFAULT_ITERATION_BUDGET

    def __post_init__(self):
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ValueError(f"need 0 <= t_min < t_max <= 1, got "
                             f"[{self.t_min}, {self.t_max}]")
        if self.lr_nerf <= 0 or (self.lr_lora is not None and self.lr_lora <= 0):
            raise ValueError("learning rates must be positive")
        if self.lambda_normal < 0:
            raise ValueError("lambda_normal must be >= 0")
        if self.iterations > self.budget_cap:
            raise ValueError(f"iterations {self.iterations} exceeds the "
                             f"per-concept budget {self.budget_cap}")
        if self.mode not in ("vsd", "sds"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.omega not in ("one", "one_minus_alpha_bar"):
            raise ValueError(f"unknown omega schedule {self.omega!r}")

    @property
    def resolved_lr_lora(self) -> float:
        return 2.0 * self.lr_nerf if self.lr_lora is None else self.lr_lora


@dataclass(frozen=True)
class Concept:
    condition: Condition
    weight: float = 1.0
    polarity: str = "positive"

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("concept weight must be positive")
        if self.polarity not in ("positive", "negative"):
            raise ValueError(f"bad polarity {self.polarity!r}")

    @property
    def signed_weight(self) -> float:
        return self.weight if self.polarity == "positive" else -self.weight


def omega_value(config: DistillConfig, t: float, schedule) -> float:
    if config.omega == "one":
        return 1.0
    return float(1.0 - schedule.alpha_bar(t))


def draw_t(rng, config: DistillConfig, iteration: int = 0) -> float:
    t_max = config.t_max
    if config.anneal_t_max and config.iterations > 1:
        frac = iteration / (config.iterations - 1)
        t_max = config.t_max + frac * (config.t_min + 1e-3 - config.t_max)
        t_max = max(t_max, config.t_min + 1e-3)
    return float(rng.uniform(config.t_min, t_max))


# ------------------------------------------------------- gradient pieces

def sds_image_grad(denoiser, image: np.ndarray, t: float, epsilon: np.ndarray,
                   condition: Condition, cfg: float, omega_w: float = 1.0) -> np.ndarray:
    """d/dI of omega ||sg(D_cfg(noisy I)) - I||^2 = 2 omega (I - sg D)."""
    noisy = add_noise(image, epsilon, t, denoiser.schedule)
    denoised = cfg_denoise(denoiser, noisy, t, condition, cfg)
    gc.assert_finite(denoised, "denoiser output")
    return 2.0 * omega_w * (image - denoised)


def proxy_loss(proxy: LoraProxy, image: np.ndarray, t: float,
               epsilon: np.ndarray, condition: Condition,
               omega_w: float = 1.0, reduction: str = "sum"):
    """omega ||proxy(noisy I) - sg(I)||^2 as a graph node; gradients reach
    adapter parameters only.

    reduction "sum" is the literal squared norm; the optimization loops
    train on "mean" so the 2:1 lr coupling stays resolution independent.
    """
    noisy = add_noise(image, epsilon, t, proxy.schedule)
    out = proxy.denoise_node(noisy, t, condition)
    target = constant(np.asarray(image, gc.default_dtype()).reshape(1, -1))
    reduce = sum_ if reduction == "sum" else mean
    return reduce(gc.square(out - target)) * constant(float(omega_w))


def vsd_field_grad(denoiser, proxy: LoraProxy, image: np.ndarray, t: float,
                   epsilon: np.ndarray, condition: Condition, cfg_main: float,
                   cfg_proxy: float, omega_w: float = 1.0) -> np.ndarray:
    """VSD update direction 2 omega (sg D'_cfg_proxy - sg D_cfg_main) with
    the identical (epsilon, t) fed to both denoisers."""
    if proxy.base is not denoiser:
        raise ValueError("proxy does not wrap the denoiser used in the main loss")
    if np.shape(image) != np.shape(epsilon):
        raise gc.ShapeMismatch("vsd_field_grad", np.shape(image), np.shape(epsilon))
    noisy = add_noise(image, epsilon, t, denoiser.schedule)
    d_main = cfg_denoise(denoiser, noisy, t, condition, cfg_main)
    d_proxy = cfg_denoise(proxy, noisy, t, condition, cfg_proxy)
    gc.assert_finite(d_main, "denoiser output")
    return 2.0 * omega_w * (d_proxy - d_main)


def composed_field_grad(concepts, image: np.ndarray, t: float,
                        epsilon: np.ndarray, denoiser, proxy,
                        config: DistillConfig) -> np.ndarray:
    """Signed weighted sum of per-concept gradients, every concept seeing
    the same (render, epsilon, t) draw. Exactly linear in the weights."""
    concepts = list(concepts)
    if not any(c.polarity == "positive" for c in concepts):
        raise ValueError("concept list needs at least one positive concept")
    omega_w = omega_value(config, t, denoiser.schedule)
    acc = None
    for concept in concepts:
        if config.mode == "sds":
            g = sds_image_grad(denoiser, image, t, epsilon, concept.condition,
                               config.cfg_main, omega_w)
        else:
            g = vsd_field_grad(denoiser, proxy, image, t, epsilon,
                               concept.condition, config.cfg_main,
                               config.cfg_proxy, omega_w)
        term = concept.signed_weight * g
        acc = term if acc is None else acc + term
    return acc


# ---------------------------------------------------------------- state

@dataclass
class DistillState:
    field: FieldParams
    proxies: dict                      # channel -> LoraProxy | None
    sampling: RaySamplingSpec
    normal_epsilon: float
    iteration: int = 0
    rng: np.random.Generator = None
    nerf_opt: object = None
    lora_opts: dict = dc_field(default_factory=dict)
    metrics: list = dc_field(default_factory=list)
    metrics_maxlen: int = 2000
    diverge_count: int = 0
    diverged: bool = False

    def push_metrics(self, row: dict) -> None:
        self.metrics.append(row)
        if len(self.metrics) > self.metrics_maxlen:
            del self.metrics[:len(self.metrics) - self.metrics_maxlen]


def init_state(field: FieldParams, denoisers: dict, config: DistillConfig,
               sampling: RaySamplingSpec | None = None,
               normal_epsilon: float | None = None,
               from_scratch: bool = False) -> DistillState:
    """Distillation state over a pretrained field (or one flagged
    from-scratch). Builds one LoRA proxy per channel wrapping the exact
    denoisers used in the main loss."""
    if field.active is None:
        raise ValueError("set_active_latent before distilling")
    if not from_scratch and not hasattr(field, "pretrained"):
        # informational only: distillation is defined from the prior space
        pass
    proxies = {}
    for channel, den in denoisers.items():
        proxies[channel] = None if den is None else lora_wrap(
            den, rank=config.lora_rank, seed=config.seed + hash(channel) % 1000)
    state = DistillState(
        field=field, proxies=proxies,
        sampling=sampling or RaySamplingSpec(n_samples=32, near=0.9, far=3.1),
        normal_epsilon=(normal_epsilon if normal_epsilon is not None
                        else 1e-3 * field.cfg.scene_radius),
        rng=np.random.default_rng(config.seed),
        nerf_opt=make_optimizer(config.optimizer, config.lr_nerf))
    for channel in denoisers:
        state.lora_opts[channel] = make_optimizer("sgd", config.resolved_lr_lora)
    return state


def _trainable_names(state: DistillState, config: DistillConfig):
    latent_names = state.field.active.trainable_names()
    if config.latent_only:
        return latent_names
    return state.field.weight_names() | latent_names


def _decayed_lr(config: DistillConfig, base_lr: float, iteration: int) -> float:
    if config.lr_decay_start is None or iteration < config.lr_decay_start:
        return base_lr
    return base_lr * config.lr_decay_gamma ** (iteration - config.lr_decay_start)


def _with_view_token(condition: Condition, token_id) -> Condition:
    if token_id is None:
        return condition
    return Condition(condition.ids + (int(token_id),))


def step(state: DistillState, cameras, denoisers: dict, concepts,
         config: DistillConfig, view_token_ids: dict | None = None) -> DistillState:
    """One test-time optimization iteration over both channels."""
    t_start = time.perf_counter()
    rng = state.rng
    cam_idx = int(rng.integers(0, len(cameras)))
    camera = cameras[cam_idx]
    token = view_descriptor(camera, camera.look_at)
    token_id = (view_token_ids or {}).get(token)

    want_normals = (config.lambda_normal > 0
                    and denoisers.get("normal") is not None)
    out = render(state.field, None, camera, state.sampling,
                 normal_epsilon=state.normal_epsilon if want_normals else None,
                 rng=rng, camera_index=cam_idx)
    t = draw_t(rng, config, state.iteration)

    h, w = camera.height, camera.width
    color_img = out.color_node.value.reshape(h, w, 3)
    step_concepts = [replace(c, condition=_with_view_token(c.condition, token_id))
                     for c in concepts]

    eps_color = rng.standard_normal(color_img.shape)
    g_color = composed_field_grad(step_concepts, color_img, t, eps_color,
                                  denoisers["color"], state.proxies["color"],
                                  config)
    terms = {}
    surrogate = sum_(out.color_node
                     * constant(g_color.reshape(-1, 3).astype(gc.default_dtype())))
    terms["color_grad_norm"] = float(np.linalg.norm(g_color))

    normal_img = eps_normal = None
    if want_normals:
        normal_img = out.normal_node.value.reshape(h, w, 3)
        eps_normal = rng.standard_normal(normal_img.shape)
        g_normal = config.lambda_normal * composed_field_grad(
            step_concepts, normal_img, t, eps_normal, denoisers["normal"],
            state.proxies["normal"], config)
        surrogate = surrogate + sum_(
            out.normal_node * constant(g_normal.reshape(-1, 3).astype(gc.default_dtype())))
        terms["normal_grad_norm"] = float(np.linalg.norm(g_normal))

    acc_pen = accumulation_penalty(out)
    terms["acc_penalty"] = float(acc_pen.value)
    surrogate = surrogate + constant(float(config.lambda_acc)) * acc_pen

    grads = backward(surrogate, state.field.store)
    trainable = _trainable_names(state, config)
    grads = {k: v for k, v in grads.items() if k in trainable}
    if config.grad_clip is not None:
        grads, pre_norm = clip_global_norm(grads, config.grad_clip)
        terms["field_grad_norm"] = pre_norm
    else:
        terms["field_grad_norm"] = global_norm(grads)

    state.nerf_opt.lr = _decayed_lr(config, config.lr_nerf, state.iteration)
    update_mean = state.nerf_opt.step(state.field.store, grads, trainable)
    terms["update_mean"] = update_mean

    # proxy terms are disabled entirely in sds mode (pure Eq.-1 loop)
    if config.mode == "vsd":
        for channel, img, eps in (("color", color_img, eps_color),
                                  ("normal", normal_img, eps_normal)):
            proxy = state.proxies.get(channel)
            if proxy is None or img is None:
                continue
            omega_w = omega_value(config, t, proxy.schedule)
            loss = None
            for concept in step_concepts:
                term = proxy_loss(proxy, img, t, eps, concept.condition,
                                  omega_w, reduction="mean")
                loss = term if loss is None else loss + term
            agrads = backward(loss, proxy.adapters)
            state.lora_opts[channel].lr = _decayed_lr(
                config, config.resolved_lr_lora, state.iteration)
            state.lora_opts[channel].step(proxy.adapters, agrads)
            terms[f"proxy_loss_{channel}"] = float(loss.value)

    if update_mean > config.update_ceiling:
        state.diverge_count += 1
        if state.diverge_count >= config.ceiling_patience:
            state.diverged = True
    else:
        state.diverge_count = 0

    state.push_metrics({
        "iteration": state.iteration, "t": t, "camera": cam_idx,
        "view_token": token, **terms,
        "wall_time": time.perf_counter() - t_start,
    })
    state.iteration += 1
    return state


def run_distill(state: DistillState, cameras, denoisers: dict, concepts,
                config: DistillConfig, metrics_path=None, checkpoint_every=None,
                checkpoint_dir=None, callback=None,
                view_token_ids: dict | None = None) -> DistillState:
    """Drive step() for config.iterations, streaming JSON-lines metrics
    and checkpointing; halts with a saved checkpoint on divergence."""
    from pathlib import Path
    mfile = open(metrics_path, "a") if metrics_path else None
    try:
        while state.iteration < config.iterations:
            step(state, cameras, denoisers, concepts, config, view_token_ids)
            if mfile:
                mfile.write(json.dumps(state.metrics[-1]) + "\n")
                mfile.flush()
            if callback is not None:
                callback(state)
            if checkpoint_every and checkpoint_dir and \
                    state.iteration % checkpoint_every == 0:
                save_state(Path(checkpoint_dir) /
                           f"state_{state.iteration:06d}.d3df", state, config)
            if state.diverged:
                if checkpoint_dir:
                    save_state(Path(checkpoint_dir) / "diverged.d3df", state, config)
                break
    finally:
        if mfile:
            mfile.close()
    return state


def concept_switch(state: DistillState, cameras, denoisers: dict,
                   concept_b: Concept, config: DistillConfig,
                   every_k: int = 50,
                   view_token_ids: dict | None = None):
    """Continue a converged run under a new concept's objective,
    snapshotting the field every k steps to expose the interpolation
    trajectory. Returns (snapshots, state)."""
    snapshots = [state.field.store.copy()]
    state.iteration = 0
    state.diverge_count = 0

    def keep(s):
        if s.iteration % every_k == 0:
            snapshots.append(s.field.store.copy())

    run_distill(state, cameras, denoisers, [concept_b], config, callback=keep)
    if (state.iteration % every_k) != 0:
        snapshots.append(state.field.store.copy())
    return snapshots, state


# ------------------------------------------------ direct image parameter

@dataclass
class ImageDistillResult:
    image: np.ndarray
    proxy: LoraProxy | None
    grad_norms: list
    trajectory: list


def image_distill(denoiser, concepts, config: DistillConfig, init_image,
                  seed: int | None = None, snapshot_every: int = 0,
                  proxy: LoraProxy | None = None) -> ImageDistillResult:
    """Distill a directly parameterized image against a denoiser (the
    renderer-free harness the oracle convergence checks run on). Pass an
    existing proxy to continue a previous run."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    image = np.array(init_image, np.float64)
    img_store = gc.ParamStore()
    img_store.add("image", image)
    img_opt = make_optimizer(config.optimizer, config.lr_nerf)
    if config.mode == "vsd":
        if proxy is None:
            proxy = lora_wrap(denoiser, rank=config.lora_rank,
                              seed=(config.seed if seed is None else seed))
        lora_opt = make_optimizer(config.optimizer, config.resolved_lr_lora)
    grad_norms, trajectory = [], []
    for it in range(config.iterations):
        image = img_store["image"]
        t = draw_t(rng, config, it)
        eps = rng.standard_normal(image.shape)
        g = composed_field_grad(concepts, image, t, eps, denoiser, proxy, config)
        img_opt.lr = _decayed_lr(config, config.lr_nerf, it)
        img_opt.step(img_store, {"image": g})
        image = img_store["image"]
        grad_norms.append(float(np.linalg.norm(g)))
        if config.mode == "vsd":
            omega_w = omega_value(config, t, denoiser.schedule)
            loss = None
            for concept in concepts:
                term = proxy_loss(proxy, image, t, eps, concept.condition,
                                  omega_w, reduction="mean")
                loss = term if loss is None else loss + term
            agrads = backward(loss, proxy.adapters)
            lora_opt.lr = _decayed_lr(config, config.resolved_lr_lora, it)
            lora_opt.step(proxy.adapters, agrads)
        if snapshot_every and (it + 1) % snapshot_every == 0:
            trajectory.append(image.copy())
    return ImageDistillResult(image=image, proxy=proxy, grad_norms=grad_norms,
                              trajectory=trajectory)


# -------------------------------------------------- state checkpointing

def save_state(path, state: DistillState, config: DistillConfig) -> None:
    store = gc.ParamStore()
    for name in state.field.store.names():
        store.add(f"field/{name}", state.field.store[name],
                  state.field.store.lr_mult(name))
    for channel, proxy in state.proxies.items():
        if proxy is None:
            continue
        for name in proxy.adapters.names():
            store.add(f"proxy_{channel}/{name}", proxy.adapters[name])
    meta = {
        "iteration": state.iteration,
        "rng_state": state.rng.bit_generator.state,
        "field_meta": {
            "layer_spec": {"depth": state.field.cfg.depth,
                           "width": state.field.cfg.width,
                           "pos_levels": state.field.cfg.pos_levels,
                           "dir_levels": state.field.cfg.dir_levels,
                           "color_width": state.field.cfg.color_width,
                           "scene_radius": state.field.cfg.scene_radius},
            "latent_dim": state.field.cfg.latent_dim,
            "n_subjects": state.field.n_subjects,
            "active": {"kind": state.field.active.kind,
                       "index": state.field.active.index,
                       "trainable": state.field.active.trainable},
        },
        "config": {k: v for k, v in vars(config).items()},
    }
    save_container(path, store, "distill-state", meta)


def load_state_arrays(path):
    """Raw state checkpoint contents (field/proxy arrays + meta); the CLI
    reassembles live objects from these."""
    c = load_container(path)
    if c.kind != "distill-state":
        raise ValueError(f"{path} holds {c.kind!r}, not distill-state")
    return c
