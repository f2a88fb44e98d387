"""FCN variants, the joint loss, and plain SGD-with-momentum training.

Three model flavours share one downsampling trunk architecture:

* ``ml``: one multiclass head over ``num_domains + 1`` labels (background
  plus one object class per domain).
* ``sd``: a single binary head for exactly one domain.
* ``md``: a shared trunk with one binary head per domain.

A training step only ever touches the trunk and the head selected by the
batch's domain, so the other heads stay byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError, TrainingError
from .nn_core import (
    LayerSpec,
    conv2d_backward,
    conv2d_forward,
    deconv2d_backward,
    deconv2d_forward,
    maxpool_backward,
    maxpool_forward,
    relu,
    relu_backward,
    softmax_cross_entropy,
)

VARIANTS = ("ml", "sd", "md")

# Channel widths: three trunk convs, then three head stages before the
# 1x1 classifier. "compact" exists so unit tests can train in seconds.
ARCH_PRESETS = {
    "standard": {"trunk": (16, 32, 64), "head": (32, 32, 16)},
    "compact": {"trunk": (4, 8, 16), "head": (8, 8, 4)},
}


@dataclass
class Layer:
    spec: LayerSpec
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None


@dataclass
class ModelParams:
    variant: str
    num_domains: int
    arch_preset: str
    trunk: list[Layer]
    heads: list[list[Layer]]

    @property
    def num_classes(self) -> int:
        return self.num_domains + 1 if self.variant == "ml" else 2


@dataclass(frozen=True)
class Batch:
    """Images (B,1,H,W) plus per-pixel labels (B,H,W).

    For md/sd the whole batch belongs to ``domain_id`` and labels are binary.
    For ml, batches may mix domains: labels are already class indices in
    {0..D} (see ml_class_labels) and domain_id is ignored (-1 by convention).
    """

    images: np.ndarray
    labels: np.ndarray
    domain_id: int


@dataclass(frozen=True)
class LossRecord:
    total: float
    fidelity: float
    regularizer: float
    per_image_fidelity: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    working_resolution: int = 128
    domain_schedule: str = "round_robin"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must not be negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.working_resolution < 4 or self.working_resolution % 4:
            raise ConfigError(
                "working_resolution must be a positive multiple of 4 "
                "(two 2x downsamplings)")
        if self.domain_schedule != "round_robin":
            raise ConfigError(f"unknown domain_schedule {self.domain_schedule!r}")


def _trunk_specs(channels) -> list[LayerSpec]:
    c1, c2, c3 = channels
    return [
        LayerSpec("conv", 1, c1, 3, 3, stride=1, padding=1),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel_h=2, kernel_w=2, stride=2),
        LayerSpec("conv", c1, c2, 3, 3, stride=1, padding=1),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel_h=2, kernel_w=2, stride=2),
        LayerSpec("conv", c2, c3, 3, 3, stride=1, padding=1),
        LayerSpec("relu"),
    ]


def _head_specs(trunk_out: int, channels, num_classes: int) -> list[LayerSpec]:
    h1, h2, h3 = channels
    return [
        LayerSpec("conv", trunk_out, h1, 3, 3, stride=1, padding=1),
        LayerSpec("relu"),
        LayerSpec("deconv", h1, h2, 4, 4, stride=2),
        LayerSpec("relu"),
        LayerSpec("deconv", h2, h3, 4, 4, stride=2),
        LayerSpec("relu"),
        LayerSpec("conv", h3, num_classes, 1, 1),
    ]


def _init_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    if not spec.has_weights:
        return Layer(spec)
    fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
    bound = math.sqrt(6.0 / fan_in)
    weights = rng.uniform(-bound, bound, spec.weight_shape()).astype(np.float32)
    bias = np.zeros(spec.out_channels, dtype=np.float32)
    return Layer(spec, weights, bias)


def build_model(variant: str, num_domains: int = 1, arch_preset: str = "standard",
                rng_seed: int = 0) -> ModelParams:
    """Initialize a model; weight draws consume one generator in layer order,
    so a fixed seed pins every parameter."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if num_domains < 1:
        raise ConfigError("num_domains must be at least 1")
    if variant == "sd" and num_domains != 1:
        raise ConfigError("sd models are single-domain; build one per domain")
    if arch_preset not in ARCH_PRESETS:
        raise ConfigError(f"unknown arch_preset {arch_preset!r}")

    preset = ARCH_PRESETS[arch_preset]
    num_classes = num_domains + 1 if variant == "ml" else 2
    num_heads = num_domains if variant == "md" else 1

    rng = np.random.default_rng(rng_seed)
    trunk = [_init_layer(s, rng) for s in _trunk_specs(preset["trunk"])]
    head_specs = _head_specs(preset["trunk"][-1], preset["head"], num_classes)
    heads = [[_init_layer(s, rng) for s in head_specs] for _ in range(num_heads)]
    return ModelParams(variant, num_domains, arch_preset, trunk, heads)


def count_parameters(params: ModelParams) -> int:
    n = 0
    for layer in _all_layers(params):
        if layer.weights is not None:
            n += layer.weights.size + layer.bias.size
    return n


def _all_layers(params: ModelParams):
    yield from params.trunk
    for head in params.heads:
        yield from head


def active_head_index(params: ModelParams, domain_id: int) -> int:
    if not 0 <= domain_id < params.num_domains:
        raise ConfigError(
            f"domain_id {domain_id} out of range for {params.num_domains} domains")
    return domain_id if params.variant == "md" else 0


def object_class(params: ModelParams, domain_id: int) -> int:
    """Class index that means 'object of this domain' in the softmax output."""
    active_head_index(params, domain_id)  # range check
    return domain_id + 1 if params.variant == "ml" else 1


def ml_class_labels(mask: np.ndarray, domain_id: int) -> np.ndarray:
    """Map a binary mask to ml class indices: background 0, object d+1."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 1:
        raise DataError("expected a binary {0,1} mask")
    return mask.astype(np.int64) * (domain_id + 1)


def _class_labels(params: ModelParams, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    hi = params.num_classes - 1
    if labels.min() < 0 or labels.max() > hi:
        kind = f"class indices in 0..{hi}" if params.variant == "ml" \
            else "binary {0,1} masks"
        raise DataError(f"expected {kind} as labels")
    return labels.astype(np.int64)


# ---------------------------------------------------------------------------
# Forward / backward through a layer stack


def _run_layers(layers: list[Layer], x: np.ndarray):
    caches = []
    for layer in layers:
        s = layer.spec
        if s.kind == "conv":
            caches.append(x)
            x = conv2d_forward(x, layer.weights, layer.bias, s.stride, s.padding)
        elif s.kind == "deconv":
            caches.append(x)
            x = deconv2d_forward(x, layer.weights, layer.bias, s.stride)
        elif s.kind == "maxpool":
            out, argmax_map = maxpool_forward(x, s.kernel_h, s.stride)
            caches.append((x.shape, argmax_map))
            x = out
        else:  # relu
            caches.append(x)
            x = relu(x)
    return x, caches


def _backprop_layers(layers: list[Layer], caches: list, grad: np.ndarray):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer, s = layers[i], layers[i].spec
        if s.kind == "conv":
            grad, gw, gb = conv2d_backward(caches[i], layer.weights, grad,
                                           s.stride, s.padding)
            grads[i] = (gw, gb)
        elif s.kind == "deconv":
            grad, gw, gb = deconv2d_backward(caches[i], layer.weights, grad, s.stride)
            grads[i] = (gw, gb)
        elif s.kind == "maxpool":
            in_shape, argmax_map = caches[i]
            grad = maxpool_backward(argmax_map, grad, in_shape)
        else:
            grad = relu_backward(caches[i], grad)
    return grad, grads


def _crop_offsets(full_h: int, full_w: int, h: int, w: int) -> tuple[int, int]:
    if full_h < h or full_w < w:
        raise ShapeError(
            f"logits {full_h}x{full_w} smaller than input {h}x{w}; "
            "input too small for this architecture")
    return (full_h - h) // 2, (full_w - w) // 2


def _forward_logits(params: ModelParams, domain_id: int, images: np.ndarray):
    """Full pass to class logits, center-cropped back to the input grid.

    The two stride-2 deconvs overshoot the input extent by a fixed border,
    so the crop realigns logits with input pixels.
    """
    head = params.heads[active_head_index(params, domain_id)]
    x, trunk_caches = _run_layers(params.trunk, images)
    x, head_caches = _run_layers(head, x)
    h, w = images.shape[-2:]
    top, left = _crop_offsets(x.shape[-2], x.shape[-1], h, w)
    logits = x[..., top : top + h, left : left + w]
    return logits, (trunk_caches, head_caches, x.shape, (top, left))


def _as_image_batch(images: np.ndarray) -> tuple[np.ndarray, bool]:
    images = np.asarray(images)
    if images.ndim == 3:
        return images[None], True
    if images.ndim != 4:
        raise ShapeError(f"expected (1,H,W) or (B,1,H,W) images, got {images.shape}")
    return images, False


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ModelParams, domain_id: int, images: np.ndarray) -> np.ndarray:
    """Per-class probability maps at input resolution.

    Accepts (1,H,W) or (B,1,H,W); returns (C,H,W) or (B,C,H,W) to match.
    """
    batch, squeeze = _as_image_batch(images)
    logits, _ = _forward_logits(params, domain_id, batch)
    probs = _softmax(logits)
    return probs[0] if squeeze else probs


def mask_from_probs(probs: np.ndarray, object_cls: int = 1) -> np.ndarray:
    """Argmax decision; ties resolve to the lower class index (background)."""
    return (np.argmax(probs, axis=0) == object_cls).astype(np.uint8)


def predict_mask(params: ModelParams, domain_id: int, image: np.ndarray) -> np.ndarray:
    probs = forward(params, domain_id, image)
    return mask_from_probs(probs, object_class(params, domain_id))


# ---------------------------------------------------------------------------
# Loss and optimization


def _regularizer(params: ModelParams, domain_id: int, lam: float) -> float:
    """(lam/2) * (|trunk weights|^2 + |active head weights|^2), biases exempt."""
    total = 0.0
    head = params.heads[active_head_index(params, domain_id)]
    for layer in list(params.trunk) + list(head):
        if layer.weights is not None:
            w = layer.weights.astype(np.float64, copy=False)
            total += float(np.vdot(w, w))
    return 0.5 * lam * total


def _batch_domain(params: ModelParams, batch: Batch) -> int:
    # ml uses the single head whatever the batch composition
    return 0 if params.variant == "ml" else batch.domain_id


def compute_loss(params: ModelParams, batch: Batch, lam: float = 0.0):
    """Returns (total, fidelity, regularizer).

    Fidelity is cross-entropy summed over every pixel of every image in the
    batch; the regularizer covers trunk plus the batch domain's head.
    """
    images, _ = _as_image_batch(batch.images)
    labels = _class_labels(params, batch.labels)
    if labels.ndim == 2:
        labels = labels[None]
    domain = _batch_domain(params, batch)
    logits, _ = _forward_logits(params, domain, images)
    fidelity, _, _ = softmax_cross_entropy(logits, labels)
    reg = _regularizer(params, domain, lam)
    return fidelity + reg, fidelity, reg


@dataclass
class SGDState:
    """Momentum buffers, laid out exactly like the parameters."""

    trunk: list
    heads: list
    step: int = 0


def init_sgd_state(params: ModelParams) -> SGDState:
    def zeros_like_stack(layers):
        return [
            (np.zeros_like(l.weights), np.zeros_like(l.bias))
            if l.weights is not None else None
            for l in layers
        ]

    return SGDState(
        trunk=zeros_like_stack(params.trunk),
        heads=[zeros_like_stack(h) for h in params.heads],
    )


def _apply_updates(layers, grads, velocities, lr, momentum):
    for layer, g, v in zip(layers, grads, velocities):
        if g is None:
            continue
        gw, gb = g
        vw, vb = v
        np.multiply(vw, momentum, out=vw)
        vw -= (lr * gw).astype(vw.dtype)
        np.multiply(vb, momentum, out=vb)
        vb -= (lr * gb).astype(vb.dtype)
        layer.weights += vw
        layer.bias += vb


def _per_image_fidelity(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-image pixel-summed cross-entropy, for reporting only."""
    picked = np.take_along_axis(probs, labels[:, None], axis=1)[:, 0]
    tiny = np.finfo(np.float64).tiny
    return -np.log(np.maximum(picked, tiny)).sum(axis=(1, 2), dtype=np.float64)


def loss_gradients(params: ModelParams, batch: Batch, lam: float = 0.0):
    """Gradients of the total loss for the trunk and the batch domain's head.

    Returns (trunk_grads, head_grads, record) where the grad lists hold
    (grad_weights, grad_bias) per layer (None for weightless ones) and
    already include the lam * weights decay term.
    """
    images, _ = _as_image_batch(batch.images)
    labels = _class_labels(params, batch.labels)
    if labels.ndim == 2:
        labels = labels[None]

    domain = _batch_domain(params, batch)
    head = params.heads[active_head_index(params, domain)]
    logits, (trunk_caches, head_caches, full_shape, (top, left)) = _forward_logits(
        params, domain, images)
    fidelity, probs, grad_logits = softmax_cross_entropy(logits, labels)
    reg = _regularizer(params, domain, lam)

    h, w = logits.shape[-2:]
    grad_full = np.zeros(full_shape, dtype=grad_logits.dtype)
    grad_full[..., top : top + h, left : left + w] = grad_logits

    grad_mid, head_grads = _backprop_layers(head, head_caches, grad_full)
    _, trunk_grads = _backprop_layers(params.trunk, trunk_caches, grad_mid)

    if lam:
        for layers, grads in ((params.trunk, trunk_grads), (head, head_grads)):
            for layer, g in zip(layers, grads):
                if g is not None:
                    g[0][...] += lam * layer.weights
    record = LossRecord(fidelity + reg, fidelity, reg,
                        _per_image_fidelity(probs, labels))
    return trunk_grads, head_grads, record


def sgd_step(params: ModelParams, batch: Batch, config: TrainConfig,
             state: SGDState) -> LossRecord:
    """One momentum-SGD update on the trunk and the batch domain's head.

    Updates params in place; the returned record is measured pre-update.
    """
    head_idx = active_head_index(params, _batch_domain(params, batch))
    trunk_grads, head_grads, record = loss_gradients(
        params, batch, config.weight_decay)

    lr, mu = config.learning_rate, config.momentum
    _apply_updates(params.trunk, trunk_grads, state.trunk, lr, mu)
    _apply_updates(params.heads[head_idx], head_grads, state.heads[head_idx], lr, mu)
    state.step += 1
    return record


# ---------------------------------------------------------------------------
# Training loop


def _round_robin_batches(data, config: TrainConfig, epoch: int):
    """One single-domain batch at a time, cycling the domains.

    Every domain's sample order reshuffles each epoch from a seed derived
    from (config seed, epoch, domain), so runs replay exactly.
    """
    queues = []
    for domain_id, (images, labels) in enumerate(data):
        rng = np.random.default_rng([config.seed, epoch, domain_id])
        perm = rng.permutation(len(images))
        chunks = [
            perm[i : i + config.batch_size]
            for i in range(0, len(perm), config.batch_size)
        ]
        queues.append((domain_id, images, labels, chunks))

    cursor = [0] * len(queues)
    while True:
        emitted = False
        for qi, (domain_id, images, labels, chunks) in enumerate(queues):
            if cursor[qi] >= len(chunks):
                continue
            idx = chunks[cursor[qi]]
            cursor[qi] += 1
            emitted = True
            domains = np.full(len(idx), domain_id)
            yield Batch(images[idx], labels[idx], domain_id), domains
        if not emitted:
            return


def _mixed_batches(data, config: TrainConfig, epoch: int):
    """Domain-mixing batches for ml: labels carry the class index."""
    pool = [(d, i) for d, (images, _) in enumerate(data)
            for i in range(len(images))]
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(pool))
    for start in range(0, len(order), config.batch_size):
        picks = [pool[k] for k in order[start : start + config.batch_size]]
        images = np.stack([data[d][0][i] for d, i in picks])
        labels = np.stack([ml_class_labels(data[d][1][i], d) for d, i in picks])
        yield Batch(images, labels, -1), np.array([d for d, _ in picks])


def train(params: ModelParams, data, config: TrainConfig, log=None) -> list[dict]:
    """Train in place over ``data``: one (images, labels) pair per domain.

    Images are (N,1,H,W) float32 at the working resolution, labels (N,H,W)
    binary. md/sd take single-domain batches round-robin; ml mixes domains
    within a batch. Returns per-epoch history entries with per-domain mean
    fidelity per image.
    """
    if config.learning_rate <= 0:
        raise ConfigError("training requires a positive learning_rate")
    if len(data) != params.num_domains:
        raise ConfigError(
            f"got data for {len(data)} domains, model has {params.num_domains}")
    res = config.working_resolution
    for domain_id, (images, labels) in enumerate(data):
        if len(images) == 0:
            raise DataError(f"domain {domain_id} has no training samples")
        if len(images) != len(labels):
            raise DataError(f"domain {domain_id}: {len(images)} images "
                            f"vs {len(labels)} labels")
        if images.shape[-2:] != (res, res):
            raise ConfigError(
                f"domain {domain_id} images are {images.shape[-2:]}, "
                f"expected working resolution ({res}, {res})")

    batcher = _mixed_batches if params.variant == "ml" else _round_robin_batches
    state = init_sgd_state(params)
    history = []
    for epoch in range(config.epochs):
        fid_sum = np.zeros(params.num_domains)
        img_count = np.zeros(params.num_domains, dtype=np.int64)
        total_sum = 0.0
        n_batches = 0
        for batch, domains in batcher(data, config, epoch):
            record = sgd_step(params, batch, config, state)
            if not math.isfinite(record.total):
                raise TrainingError(
                    f"non-finite loss {record.total} at epoch {epoch}",
                    batch_index=state.step - 1)
            np.add.at(fid_sum, domains, record.per_image_fidelity)
            np.add.at(img_count, domains, 1)
            total_sum += record.total
            n_batches += 1
        entry = {
            "epoch": epoch,
            "mean_batch_loss": total_sum / n_batches,
            "per_domain_fidelity": (fid_sum / img_count).tolist(),
        }
        history.append(entry)
        if log is not None:
            log(entry)
    return history
