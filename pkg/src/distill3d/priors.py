"""Denoiser abstraction standing in for the text-to-image diffusion
priors: diffusion noising, classifier-free guidance, an analytic Gaussian
oracle family, a small trainable denoiser, concept fine-tuning, and
low-rank adaptation proxies.

All denoisers predict the clean image directly (x0-prediction); the
losses in `distill` are written against that convention.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import gradcore as gc
from .container import load_container, save_container
from .gradcore import Node, ParamStore, concat, constant, mlp_apply

UNCONDITIONAL_ID = 0


# ------------------------------------------------------------- schedule

class CosineSchedule:
    """alpha_bar(t) on [0, 1] -> (0, 1]: floored cosine schedule.

    alpha_bar(0) = 1 exactly, alpha_bar(1) = floor exactly, strictly
    decreasing in between (the floor is blended, not clamped, so
    monotonicity survives near t = 1).
    """

    def __init__(self, s: float = 0.008, floor: float = 1e-4):
        self.s = s
        self.floor = floor
        self._norm = np.cos(0.5 * np.pi * s / (1 + s)) ** 2

    def alpha_bar(self, t):
        t = np.asarray(t, np.float64)
        raw = np.cos(0.5 * np.pi * (t + self.s) / (1 + self.s)) ** 2 / self._norm
        out = self.floor + (1.0 - self.floor) * raw
        return out if out.ndim else float(out)

    def __call__(self, t):
        return self.alpha_bar(t)


DEFAULT_SCHEDULE = CosineSchedule()


def add_noise(image: np.ndarray, epsilon: np.ndarray, t: float,
              schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """noisy = sqrt(alpha_bar) * image + sqrt(1 - alpha_bar) * epsilon."""
    if np.shape(epsilon) != np.shape(image):
        raise gc.ShapeMismatch("add_noise", np.shape(image), np.shape(epsilon))
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * image + np.sqrt(1.0 - ab) * epsilon


# ------------------------------------------------------------ condition

@dataclass(frozen=True)
class Condition:
    """Conditioning signal: a tuple of token ids whose embeddings sum.

    Token id 0 is the reserved UNCONDITIONAL label with a pinned all-zero
    embedding; prompt templates collapse to (identity token, concept
    label, view token) tuples.
    """

    ids: tuple = ()

    @property
    def concept_id(self) -> int:
        return self.ids[0] if self.ids else UNCONDITIONAL_ID

    @staticmethod
    def uncond() -> "Condition":
        return Condition(())

    @staticmethod
    def of(*ids) -> "Condition":
        return Condition(tuple(int(i) for i in ids if int(i) != UNCONDITIONAL_ID))

    def is_unconditional(self) -> bool:
        return len(self.ids) == 0


UNCONDITIONAL = Condition.uncond()


def cfg_denoise(denoiser, noisy: np.ndarray, t: float, condition: Condition,
                w: float) -> np.ndarray:
    """Classifier-free guidance: affine extrapolation between the
    unconditional and conditional denoised outputs.

    Computed as (1 - w) * uncond + w * cond so the w = 0 / w = 1
    endpoints and the affinity invariant hold bitwise.
    """
    if w < 0:
        raise ValueError("guidance weight must be nonnegative")
    native = getattr(denoiser, "denoise_cfg", None)
    if native is not None:
        return native(noisy, t, condition, w)
    cond = denoiser.denoise(noisy, t, condition)
    uncond = denoiser.denoise(noisy, t, UNCONDITIONAL)
    return (1.0 - w) * uncond + w * cond


# ----------------------------------------------------- analytic oracles

@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    var: float
    weight: float = 1.0


class AnalyticGaussianDenoiser:
    """Exact posterior mean for Gaussian (mixture) targets under the
    noising process; the verification oracle every distillation test
    leans on.

    components_by_label maps concept ids to component lists; the
    UNCONDITIONAL label denoises under the union mixture.
    """

    def __init__(self, components_by_label: dict, schedule=DEFAULT_SCHEDULE,
                 uncond_components=None):
        if UNCONDITIONAL_ID in components_by_label:
            raise ValueError("label 0 is reserved for UNCONDITIONAL")
        self.schedule = schedule
        self._by_label = {
            int(k): [GaussianComponent(np.asarray(c.mean, np.float64), float(c.var),
                                       float(c.weight)) for c in v]
            for k, v in components_by_label.items()
        }
        if uncond_components is None:
            self._uncond = [c for comps in self._by_label.values() for c in comps]
        else:
            self._uncond = [GaussianComponent(np.asarray(c.mean, np.float64),
                                              float(c.var), float(c.weight))
                            for c in uncond_components]
        shapes = {c.mean.shape
                  for comps in list(self._by_label.values()) + [self._uncond]
                  for c in comps}
        if len(shapes) != 1:
            raise ValueError(f"component means disagree on shape: {shapes}")
        self.image_shape = shapes.pop()

    def labels(self):
        return sorted(self._by_label)

    def _components(self, condition: Condition):
        if condition.is_unconditional():
            return self._uncond
        comps = self._by_label.get(condition.concept_id)
        if comps is None:
            raise KeyError(f"unknown concept label {condition.concept_id}")
        return comps

    def denoise(self, noisy: np.ndarray, t: float, condition: Condition) -> np.ndarray:
        x = np.asarray(noisy, np.float64)
        if x.shape != self.image_shape:
            raise gc.ShapeMismatch("denoise", x.shape, self.image_shape)
        ab = self.schedule.alpha_bar(t)
        comps = self._components(condition)
        if len(comps) == 1:
            return self._posterior_mean(x, ab, comps[0]).astype(noisy.dtype)
        # responsibility-weighted mixture posterior mean, log-space
        logs = np.empty(len(comps))
        posts = []
        n = x.size
        for i, c in enumerate(comps):
            s2 = ab * c.var + (1.0 - ab)
            logs[i] = (np.log(c.weight)
                       - 0.5 * np.sum((x - np.sqrt(ab) * c.mean) ** 2) / s2
                       - 0.5 * n * np.log(s2))
            posts.append(self._posterior_mean(x, ab, c))
        logs -= logs.max()
        r = np.exp(logs)
        r /= r.sum()
        out = np.zeros_like(x)
        for ri, pi in zip(r, posts):
            out += ri * pi
        return out.astype(noisy.dtype)

    @staticmethod
    def _posterior_mean(x_t, ab, comp: GaussianComponent):
        denom = ab * comp.var + (1.0 - ab)
        return (np.sqrt(ab) * comp.var * x_t + (1.0 - ab) * comp.mean) / denom


def analytic_gaussian_denoiser(mean: np.ndarray, var: float,
                               schedule=DEFAULT_SCHEDULE,
                               label: int = 1) -> AnalyticGaussianDenoiser:
    """Single-target oracle N(mean, var * Id); conditional and
    unconditional outputs coincide."""
    if var <= 0:
        raise ValueError("var must be positive")
    return AnalyticGaussianDenoiser({label: [GaussianComponent(mean, var)]},
                                    schedule)


# --------------------------------------------------------- toy denoiser

def _time_features(t, levels: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, np.float64))
    parts = [t]
    for k in range(levels):
        parts.append(np.sin((2.0 ** k) * np.pi * t))
        parts.append(np.cos((2.0 ** k) * np.pi * t))
    return np.stack(parts, axis=-1)


@dataclass(frozen=True)
class ToyDenoiserSpec:
    image_shape: tuple
    hidden: tuple = (128, 128)
    emb_dim: int = 8
    t_levels: int = 4
    n_labels: int = 4
    reserved_tokens: tuple = ()   # learned-token labels ("[V]"/"[W]" analogs)

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def in_dim(self) -> int:
        return self.n_pixels + self.emb_dim + 1 + 2 * self.t_levels


class ToyDenoiser:
    """Small MLP denoiser over flattened images, conditioned on summed
    token embeddings and time features."""

    def __init__(self, spec: ToyDenoiserSpec, seed: int = 0,
                 schedule=DEFAULT_SCHEDULE, params: ParamStore | None = None):
        self.spec = spec
        self.schedule = schedule
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        dt = gc.default_dtype()
        self.params = ParamStore()
        self.params.add("emb", np.concatenate(
            [np.zeros((1, spec.emb_dim)),
             0.3 * rng.normal(size=(spec.n_labels - 1, spec.emb_dim))]).astype(dt))
        sizes = (spec.in_dim,) + tuple(spec.hidden) + (spec.n_pixels,)
        for i, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params.add(f"net{i}.w",
                            (rng.normal(0, np.sqrt(2.0 / din), (din, dout))).astype(dt))
            self.params.add(f"net{i}.b", np.zeros(dout, dt))

    def labels(self):
        return list(range(1, self.spec.n_labels))

    def pin_uncond_embedding(self) -> None:
        """Re-zero the reserved UNCONDITIONAL row after optimizer steps."""
        emb = self.params["emb"]
        emb[UNCONDITIONAL_ID, :] = 0.0

    def embedding_of(self, condition: Condition) -> np.ndarray:
        emb = self.params["emb"]
        out = np.zeros(self.spec.emb_dim, emb.dtype)
        for i in condition.ids:
            out += emb[i]
        return out

    def _condition_matrix(self, conditions) -> np.ndarray:
        m = np.zeros((len(conditions), self.spec.n_labels), gc.default_dtype())
        for row, cond in enumerate(conditions):
            for i in cond.ids:
                if not 0 <= i < self.spec.n_labels:
                    raise KeyError(f"unknown token id {i}")
                m[row, i] += 1.0
        return m

    def denoise_node(self, noisy: np.ndarray, t, conditions) -> Node:
        """Graph forward for a batch [B, *image_shape] (or one image);
        t and conditions may be scalars or per-row."""
        x = np.asarray(noisy, gc.default_dtype())
        single = x.shape == self.spec.image_shape
        if single:
            x = x[None]
        b = x.shape[0]
        if isinstance(conditions, Condition):
            conditions = [conditions] * b
        tf = _time_features(np.broadcast_to(np.asarray(t, np.float64), (b,)),
                            self.spec.t_levels).astype(gc.default_dtype())
        cm = self._condition_matrix(conditions)
        emb = gc.matmul(constant(cm), self.params.leaf("emb"))
        feats = concat([constant(x.reshape(b, -1)), emb, constant(tf)], axis=1)
        out = mlp_apply(self.params, feats, prefix="net")
        return out

    def denoise(self, noisy: np.ndarray, t: float, condition: Condition) -> np.ndarray:
        out = self.denoise_node(noisy, t, condition).value
        return out.reshape(np.shape(noisy)).astype(np.asarray(noisy).dtype)

    def copy(self) -> "ToyDenoiser":
        return ToyDenoiser(self.spec, schedule=self.schedule, params=self.params.copy())

    def save(self, path) -> None:
        meta = {"spec": {
            "image_shape": list(self.spec.image_shape),
            "hidden": list(self.spec.hidden), "emb_dim": self.spec.emb_dim,
            "t_levels": self.spec.t_levels, "n_labels": self.spec.n_labels,
            "reserved_tokens": list(self.spec.reserved_tokens)}}
        save_container(path, self.params, "denoiser", meta)

    @staticmethod
    def load(path) -> "ToyDenoiser":
        c = load_container(path)
        if c.kind != "denoiser":
            raise ValueError(f"{path} holds a {c.kind!r} checkpoint, not a denoiser")
        s = c.meta["spec"]
        spec = ToyDenoiserSpec(
            image_shape=tuple(s["image_shape"]), hidden=tuple(s["hidden"]),
            emb_dim=s["emb_dim"], t_levels=s["t_levels"], n_labels=s["n_labels"],
            reserved_tokens=tuple(s.get("reserved_tokens", ())))
        return ToyDenoiser(spec, params=c.store)


def _denoise_training_loop(denoiser: ToyDenoiser, pairs, steps: int, lr: float,
                           rng, p_uncond: float, batch_size: int):
    from .optim import Adam
    opt = Adam(lr)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
        images = np.stack([np.asarray(pairs[i][0], gc.default_dtype()) for i in idx])
        conds = [pairs[i][1] for i in idx]
        if p_uncond > 0:
            drop = rng.random(len(idx)) < p_uncond
            conds = [UNCONDITIONAL if d else c for c, d in zip(conds, drop)]
        t = rng.uniform(0.0, 1.0, size=len(idx))
        ab = np.array([denoiser.schedule.alpha_bar(ti) for ti in t])
        eps = rng.standard_normal(images.shape).astype(gc.default_dtype())
        shape_ones = (len(idx),) + (1,) * (images.ndim - 1)
        noisy = (np.sqrt(ab).reshape(shape_ones) * images
                 + np.sqrt(1 - ab).reshape(shape_ones) * eps)
        out = denoiser.denoise_node(noisy, t, conds)
        target = constant(images.reshape(len(idx), -1))
        loss = gc.mean(gc.square(out - target))
        grads = gc.backward(loss, denoiser.params)
        opt.step(denoiser.params, grads)
        denoiser.pin_uncond_embedding()
        losses.append(float(loss.value))
    return losses


def toy_denoiser_train(dataset, spec: ToyDenoiserSpec, steps: int, lr: float,
                       seed: int = 0, p_uncond: float = 0.1,
                       batch_size: int = 16, schedule=DEFAULT_SCHEDULE) -> ToyDenoiser:
    """Train a fresh toy denoiser on (image, Condition) pairs with label
    dropout so classifier-free guidance is meaningful."""
    if not dataset:
        raise ValueError("dataset is empty")
    den = ToyDenoiser(spec, seed=seed, schedule=schedule)
    rng = np.random.default_rng(seed)
    den.train_losses = _denoise_training_loop(den, list(dataset), steps, lr, rng,
                                              p_uncond, batch_size)
    return den


def finetune_concept(denoiser: ToyDenoiser, images, new_condition: Condition,
                     steps: int, lr: float, seed: int = 0,
                     batch_size: int = 16) -> ToyDenoiser:
    """Continue denoising training on the new concept pairs only (a
    separate copy; the original stays frozen). No label dropout, matching
    fine-tuning without class-prior regularization."""
    reserved = set(denoiser.spec.reserved_tokens)
    if not reserved.intersection(new_condition.ids):
        raise ValueError(
            f"new_condition {new_condition.ids} does not use a reserved "
            f"learned-token label (reserved: {sorted(reserved)})")
    tuned = denoiser.copy()
    pairs = [(img, new_condition) for img in images]
    rng = np.random.default_rng(seed)
    tuned.finetune_losses = _denoise_training_loop(
        tuned, pairs, steps, lr, rng, p_uncond=0.0, batch_size=batch_size)
    return tuned


# ------------------------------------------------------------------ LoRA

class LoraProxy:
    """Low-rank adapted copy of a frozen denoiser.

    Toy denoisers get per-linear-layer (A: out x r, B: r x in) pairs with
    B = 0 at init, so the proxy output bit-equals the base until the
    first adapter update. Analytic denoisers have no linear layers; they
    get one adapter mapping [flat noisy image, time features, condition
    one-hot, 1] to an additive output delta (see decisions ledger).
    """

    def __init__(self, base, rank: int, scale: float = 1.0, seed: int = 0):
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.base = base
        self.rank = rank
        self.scale = scale
        self.schedule = base.schedule
        self.adapters = ParamStore()
        rng = np.random.default_rng(seed)
        dt = gc.default_dtype()
        if isinstance(base, ToyDenoiser):
            self.kind = "layers"
            i = 0
            while f"net{i}.w" in base.params:
                din, dout = base.params[f"net{i}.w"].shape
                if rank > min(din, dout):
                    raise ValueError(
                        f"rank {rank} exceeds layer net{i} dimensions {din}x{dout}")
                self.adapters.add(f"lora{i}.A",
                                  (rng.normal(0, 1.0 / np.sqrt(rank), (dout, rank))).astype(dt))
                self.adapters.add(f"lora{i}.B", np.zeros((rank, din), dt))
                i += 1
            self._n_layers = i
        else:
            self.kind = "output"
            self._n_labels = (max(base.labels()) + 1) if base.labels() else 1
            self._t_levels = 4
            npix = int(np.prod(base.image_shape))
            fdim = npix + (1 + 2 * self._t_levels) + self._n_labels + 1
            if rank > min(fdim, npix):
                raise ValueError(f"rank {rank} exceeds adapter dimensions")
            self.adapters.add("lora.A",
                              (rng.normal(0, 1.0 / np.sqrt(rank), (npix, rank))).astype(dt))
            self.adapters.add("lora.B", np.zeros((rank, fdim), dt))

    def labels(self):
        return self.base.labels()

    # --- toy path: rebuild the base MLP with adapter deltas interleaved

    def _toy_forward(self, noisy, t, conditions) -> Node:
        base = self.base
        x = np.asarray(noisy, gc.default_dtype())
        if x.shape == base.spec.image_shape:
            x = x[None]
        b = x.shape[0]
        if isinstance(conditions, Condition):
            conditions = [conditions] * b
        tf = _time_features(np.broadcast_to(np.asarray(t, np.float64), (b,)),
                            base.spec.t_levels).astype(gc.default_dtype())
        cm = base._condition_matrix(conditions)
        emb = gc.matmul(constant(cm), constant(base.params["emb"]))
        h = concat([constant(x.reshape(b, -1)), emb, constant(tf)], axis=1)
        for i in range(self._n_layers):
            w = constant(base.params[f"net{i}.w"])   # frozen base
            bias = constant(base.params[f"net{i}.b"])
            a_ad = self.adapters.leaf(f"lora{i}.A")
            b_ad = self.adapters.leaf(f"lora{i}.B")
            delta = gc.matmul(gc.matmul(h, _transpose(b_ad)), _transpose(a_ad))
            h = gc.matmul(h, w) + bias + delta * constant(self.scale)
            if i < self._n_layers - 1:
                h = gc.relu(h)
        return h

    # --- analytic path: base output plus a low-rank affine correction

    def _output_forward(self, noisy, t, conditions) -> Node:
        x = np.asarray(noisy, np.float64)
        single = x.shape == self.base.image_shape
        xs = x[None] if single else x
        b = xs.shape[0]
        if isinstance(conditions, Condition):
            conditions = [conditions] * b
        ts = np.broadcast_to(np.asarray(t, np.float64), (b,))
        base_out = np.stack([
            np.asarray(self.base.denoise(xs[i], float(ts[i]), conditions[i]), np.float64)
            for i in range(b)])
        tf = _time_features(ts, self._t_levels)
        onehot = np.zeros((b, self._n_labels))
        for row, cond in enumerate(conditions):
            for i in cond.ids:
                onehot[row, i] += 1.0
        feats = np.concatenate(
            [xs.reshape(b, -1), tf, onehot, np.ones((b, 1))], axis=1)
        a_ad = self.adapters.leaf("lora.A")
        b_ad = self.adapters.leaf("lora.B")
        delta = gc.matmul(gc.matmul(constant(feats.astype(gc.default_dtype())),
                                    _transpose(b_ad)), _transpose(a_ad))
        # keep the base output at its own precision so identity-at-init
        # stays bitwise even in float64 runs
        base_node = Node(base_out.reshape(b, -1))
        return base_node + delta * constant(self.scale)

    def denoise_node(self, noisy, t, conditions) -> Node:
        if self.kind == "layers":
            return self._toy_forward(noisy, t, conditions)
        return self._output_forward(noisy, t, conditions)

    def denoise(self, noisy: np.ndarray, t: float, condition: Condition) -> np.ndarray:
        out = self.denoise_node(noisy, t, condition).value
        return out.reshape(np.shape(noisy)).astype(np.asarray(noisy).dtype)


def _transpose(node: Node) -> Node:
    # matmul-ready transpose built from the structural ops
    val = node.value
    return Node(np.ascontiguousarray(val.T), "transpose", (node,),
                lambda g: (np.ascontiguousarray(g.T),))


def lora_wrap(denoiser, rank: int = 4, scale: float = 1.0, seed: int = 0) -> LoraProxy:
    """Wrap a frozen denoiser in a LoRA proxy; identical outputs until
    the first adapter update (B = 0 init)."""
    return LoraProxy(denoiser, rank=rank, scale=scale, seed=seed)
