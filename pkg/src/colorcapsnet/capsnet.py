# capsnet.py
"""
 Copyright 2025 Google LLC

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
 """

import dataclasses
import logging
from typing import Literal, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from colorcapsnet import tensor_core as tc
from colorcapsnet.checkpoint import import_external
from colorcapsnet.errors import ConfigurationError, DomainError, ShapeError, WeightImportError
from colorcapsnet.tensor_core import BatchNormState, ConvSpec, Tensor

logger = logging.getLogger(__name__)

SQUASH_EPS = 1e-8
LAB_CHANNELS = 3

# Names an external VGG export must provide, mapped onto model slots.
VGG_NAME_MAP = {
    "vgg.conv1_1.weight": "conv1.weight",
    "vgg.conv1_1.bias": "conv1.bias",
    "vgg.conv1_2.weight": "conv2.weight",
    "vgg.conv1_2.bias": "conv2.bias",
}


class ColorCapsNetConfig(BaseModel):
    """Topology and loss settings. Defaults reproduce the published network."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    patch_size: int = 9
    routing_iterations: int = 1
    num_output_capsules: int = 6
    output_capsule_dim: int = 16
    primary_capsule_count: int = 32
    primary_capsule_dim: int = 8
    decoder_hidden: tuple[int, ...] = (512, 1024)
    loss: Literal["mse", "margin"] = "mse"
    margin_lambda: float = 0.5
    reconstruction_weight: float = 0.0005
    feature_detector: Literal["vgg", "capsnet"] = "vgg"
    feature_channels: int | None = None
    batchnorm: bool = True

    @field_validator("patch_size")
    @classmethod
    def _patch_size_lower_bound(cls, value: int) -> int:
        if value < 9:
            raise ValueError(f"patch_size must be >= 9, got {value}")
        return value

    @field_validator("routing_iterations", "num_output_capsules", "output_capsule_dim",
                     "primary_capsule_count", "primary_capsule_dim")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError(f"must be >= 1, got {value}")
        return value

    @field_validator("decoder_hidden")
    @classmethod
    def _positive_widths(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(width < 1 for width in value):
            raise ValueError(f"decoder widths must be >= 1, got {value}")
        return value

    @field_validator("margin_lambda", "reconstruction_weight")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError(f"must be >= 0, got {value}")
        return value

    @property
    def detector_channels(self) -> int:
        if self.feature_channels is not None:
            return self.feature_channels
        return 64 if self.feature_detector == "vgg" else 256

    @property
    def primary_filters(self) -> int:
        return self.primary_capsule_count * self.primary_capsule_dim


def reduced_config(**overrides) -> ColorCapsNetConfig:
    """The width-reduced topology used for end-to-end gradient checks."""
    settings = dict(feature_channels=8, primary_capsule_count=4, decoder_hidden=(16, 32))
    settings.update(overrides)
    return ColorCapsNetConfig(**settings)


# --- model containers ---

@dataclasses.dataclass
class LayerState:
    """Learnable tensors of one layer; `buffers` hold non-trainable statistics."""
    kind: str
    params: dict[str, Tensor]
    buffers: dict[str, Tensor] = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class ModelParams:
    config: ColorCapsNetConfig
    layers: dict[str, LayerState]

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{layer}.{key}": value
                for layer, state in self.layers.items() for key, value in state.params.items()}

    def named_buffers(self) -> dict[str, Tensor]:
        return {f"{layer}.{key}": value
                for layer, state in self.layers.items() for key, value in state.buffers.items()}

    def named_tensors(self) -> dict[str, Tensor]:
        tensors = {}
        for layer, state in self.layers.items():
            for key, value in {**state.params, **state.buffers}.items():
                tensors[f"{layer}.{key}"] = value
        return tensors

    def num_parameters(self) -> int:
        return int(sum(value.size for value in self.named_parameters().values()))

    def replace(self, updates: Mapping[str, Tensor]) -> "ModelParams":
        """Returns a copy with the named tensors swapped; unknown names raise KeyError."""
        layers = {name: LayerState(state.kind, dict(state.params), dict(state.buffers))
                  for name, state in self.layers.items()}
        for full_name, value in updates.items():
            layer, _, key = full_name.partition(".")
            if layer not in layers:
                raise KeyError(full_name)
            state = layers[layer]
            if key in state.params:
                state.params[key] = value
            elif key in state.buffers:
                state.buffers[key] = value
            else:
                raise KeyError(full_name)
        return ModelParams(self.config, layers)

    def astype(self, dtype) -> "ModelParams":
        return self.replace({name: value.astype(dtype) for name, value in self.named_tensors().items()})

    def bn_state(self, layer: str) -> BatchNormState:
        state = self.layers[layer]
        return BatchNormState(gamma=state.params["gamma"], beta=state.params["beta"],
                              running_mean=state.buffers["running_mean"],
                              running_var=state.buffers["running_var"])


# --- topology ---

def detector_specs(config: ColorCapsNetConfig) -> list[tuple[str, ConvSpec]]:
    channels = config.detector_channels
    if config.feature_detector == "vgg":
        return [("conv1", ConvSpec(1, channels, 3, stride=1, padding=1)),
                ("conv2", ConvSpec(channels, channels, 3, stride=1, padding=1))]
    # baseline detector: one wide 9x9 layer, padded to keep the patch extent
    return [("conv1", ConvSpec(1, channels, 9, stride=1, padding=4))]


def primary_spec(config: ColorCapsNetConfig) -> ConvSpec:
    return ConvSpec(config.detector_channels, config.primary_filters, config.patch_size)


def decoder_widths(config: ColorCapsNetConfig) -> list[int]:
    n = config.patch_size
    return ([config.num_output_capsules * config.output_capsule_dim]
            + list(config.decoder_hidden) + [LAB_CHANNELS * n * n])


def decoder_names(config: ColorCapsNetConfig) -> list[str]:
    hidden = [f"decoder{i + 1}" for i in range(len(config.decoder_hidden))]
    return hidden + ["decoder_out"]


def _bn_name(conv_name: str) -> str:
    return "primary_bn" if conv_name == "primary_conv" else conv_name.replace("conv", "bn")


@dataclasses.dataclass(frozen=True)
class ParameterCount:
    total: int
    breakdown: dict[str, int]


def count_parameters(config: ColorCapsNetConfig) -> ParameterCount:
    """Closed-form count of trainable scalars, per named layer."""
    breakdown: dict[str, int] = {}
    convs = detector_specs(config) + [("primary_conv", primary_spec(config))]
    for name, spec in convs:
        breakdown[name] = spec.out_channels * spec.in_channels * spec.kernel ** 2 + spec.out_channels
        if config.batchnorm:
            breakdown[_bn_name(name)] = 2 * spec.out_channels
    breakdown["routing"] = (config.primary_capsule_count * config.num_output_capsules
                            * config.primary_capsule_dim * config.output_capsule_dim)
    widths = decoder_widths(config)
    for name, fan_in, fan_out in zip(decoder_names(config), widths[:-1], widths[1:]):
        breakdown[name] = fan_in * fan_out + fan_out
    return ParameterCount(total=sum(breakdown.values()), breakdown=breakdown)


def build_model(config: ColorCapsNetConfig, seed: int = 0, vgg_weights=None) -> ModelParams:
    """Initializes every layer deterministically from `seed`.

    Convolution kernels draw from N(0, 2/fan_in), dense and routing weights
    from a uniform with variance 2/(fan_in + fan_out); biases start at zero,
    batchnorm at gamma=1, beta=0. When `vgg_weights` (a Checkpoint) is given,
    the first two convolutions are overwritten and stay trainable.
    """
    rng = np.random.default_rng(seed)
    layers: dict[str, LayerState] = {}
    convs = detector_specs(config) + [("primary_conv", primary_spec(config))]
    for name, spec in convs:
        fan_in = spec.in_channels * spec.kernel ** 2
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        layers[name] = LayerState("conv", {
            "weight": tc.he_normal(rng, shape, fan_in),
            "bias": np.zeros(spec.out_channels, dtype=tc.DEFAULT_DTYPE)})
        if config.batchnorm:
            bn = BatchNormState.create(spec.out_channels)
            layers[_bn_name(name)] = LayerState(
                "batchnorm", {"gamma": bn.gamma, "beta": bn.beta},
                {"running_mean": bn.running_mean, "running_var": bn.running_var})

    p, c = config.primary_capsule_count, config.num_output_capsules
    d, o = config.primary_capsule_dim, config.output_capsule_dim
    layers["routing"] = LayerState("routing", {"weight": tc.glorot_uniform(rng, (p, c, d, o), d, o)})

    widths = decoder_widths(config)
    for name, fan_in, fan_out in zip(decoder_names(config), widths[:-1], widths[1:]):
        layers[name] = LayerState("dense", {
            "weight": tc.glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out),
            "bias": np.zeros(fan_out, dtype=tc.DEFAULT_DTYPE)})

    model = ModelParams(config, layers)
    logger.debug(f"Built model with {model.num_parameters()} trainable parameters (seed={seed})")

    if vgg_weights is not None:
        if config.feature_detector != "vgg":
            raise ConfigurationError("VGG weights can only initialize the 'vgg' feature detector")
        _check_vgg_entries(vgg_weights, model)
        model = import_external(vgg_weights, model, VGG_NAME_MAP)
    return model


def _check_vgg_entries(vgg_weights, model: ModelParams) -> None:
    entries = vgg_weights.tensors()
    slots = model.named_parameters()
    missing = [name for name in VGG_NAME_MAP if name not in entries]
    misshaped = [name for name, slot in VGG_NAME_MAP.items()
                 if name in entries and entries[name].shape != slots[slot].shape]
    if missing or misshaped:
        details = [f"missing {name}" for name in missing]
        details += [f"{name} has shape {list(entries[name].shape)}, expected "
                    f"{list(slots[VGG_NAME_MAP[name]].shape)}" for name in misshaped]
        logger.error(f"VGG import failed: {'; '.join(details)}")
        raise WeightImportError(f"cannot import VGG weights: {'; '.join(details)}", missing + misshaped)


# --- capsules ---

@dataclasses.dataclass(frozen=True)
class CapsuleSet:
    """Routed capsule activities [batch, count, dim] and the routing trace."""
    activities: Tensor
    totals: Tensor | None = None
    couplings: Tensor | None = None
    coupling_trace: tuple[Tensor, ...] = ()

    @property
    def lengths(self) -> Tensor:
        return np.linalg.norm(self.activities, axis=-1)


def _squash_factor(norm: Tensor) -> Tensor:
    return norm ** 2 / ((1.0 + norm ** 2) * (norm + SQUASH_EPS))


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Scales `s` to norm |s|^2/(1+|s|^2) along `axis`; squash(0) is exactly 0."""
    norm = np.linalg.norm(s, axis=axis, keepdims=True)
    return s * _squash_factor(norm)


def squash_backward(grad_out: Tensor, s: Tensor, axis: int = -1) -> Tensor:
    norm = np.linalg.norm(s, axis=axis, keepdims=True)
    factor = _squash_factor(norm)
    denom = (1.0 + norm ** 2) * (norm + SQUASH_EPS)
    # d(factor)/d(norm) divided by norm, written without a 1/norm term
    dfactor = (2.0 * (1.0 + norm ** 2) * (norm + SQUASH_EPS)
               - norm * (2.0 * norm * (norm + SQUASH_EPS) + 1.0 + norm ** 2)) / denom ** 2
    return factor * grad_out + dfactor * np.sum(s * grad_out, axis=axis, keepdims=True) * s


def dynamic_routing(predictions: Tensor, iterations: int) -> CapsuleSet:
    """Routing-by-agreement over predictions [batch, primary, C, dim].

    Logits start at zero, so the first pass averages predictions uniformly.
    Logits grow by the agreement u_hat . v after every pass but the last.
    """
    if iterations < 1:
        raise ConfigurationError(f"routing needs at least one iteration, got {iterations}")
    if predictions.ndim != 4:
        raise ShapeError(f"routing predictions must be [batch, primary, C, dim], got {predictions.shape}")
    num_out = predictions.shape[2]
    logits = np.zeros(predictions.shape[:3], dtype=predictions.dtype)
    trace = []
    for iteration in range(iterations):
        couplings = tc.softmax(logits, axis=2)
        trace.append(couplings)
        if iteration == 0:
            totals = predictions.sum(axis=1) / num_out
        else:
            totals = np.einsum("bpc,bpco->bco", couplings, predictions)
        activities = squash(totals)
        if iteration < iterations - 1:
            logits = logits + np.einsum("bpco,bco->bpc", predictions, activities)
    logger.debug(f"Routed {predictions.shape[1]} capsules into {num_out} over {iterations} iteration(s)")
    return CapsuleSet(activities, totals, couplings, tuple(trace))


def routing_backward(grad_activities: Tensor, caps: CapsuleSet) -> Tensor:
    """Gradient w.r.t. predictions, holding the final couplings constant."""
    grad_totals = squash_backward(grad_activities, caps.totals)
    return caps.couplings[..., None] * grad_totals[:, None, :, :]


# --- forward / backward ---

@dataclasses.dataclass
class ForwardCache:
    mode: str
    values: dict[str, Tensor]
    bn_caches: dict[str, tc.BatchNormCache]
    caps: CapsuleSet


def forward(model: ModelParams, gray: Tensor, mode: tc.Mode = "train") -> tuple[Tensor, CapsuleSet, ForwardCache]:
    """Colorizes a batch of grayscale patches.

    Args:
        model (ModelParams): Network weights.
        gray (Tensor): Normalized lightness, shape [batch, 1, n, n], values in [0, 1].
        mode (str): 'train' uses batch statistics, 'infer' the running ones and
            evaluates patch by patch.

    Returns:
        tuple: normalized Lab prediction [batch, 3, n, n], routed capsules, backward cache.
    """
    config = model.config
    n = config.patch_size
    if gray.ndim != 4 or gray.shape[1:] != (1, n, n):
        raise ShapeError(f"expected gray batch of shape [batch, 1, {n}, {n}], got {gray.shape}")
    if gray.size and (gray.min() < 0.0 or gray.max() > 1.0):
        raise DomainError(f"gray input must lie in [0, 1], got range [{gray.min()}, {gray.max()}]")
    if mode == "infer" and gray.shape[0] > 1:
        return _forward_rows(model, gray)
    if mode == "train" and config.batchnorm and gray.shape[0] == 1:
        logger.warning("Training batchnorm on a single patch: primary capsule statistics have zero variance")

    values: dict[str, Tensor] = {}
    bn_caches: dict[str, tc.BatchNormCache] = {}
    h = gray
    convs = detector_specs(config) + [("primary_conv", primary_spec(config))]
    for name, spec in convs:
        values[f"{name}.in"] = h
        layer = model.layers[name].params
        z = tc.conv2d_forward(h, layer["weight"], layer["bias"], spec)
        if config.batchnorm:
            bn = _bn_name(name)
            z, bn_caches[bn] = tc.batchnorm_forward(z, model.bn_state(bn), mode)
        values[f"{name}.out"] = z
        h = tc.relu(z) if name != "primary_conv" else z

    batch = gray.shape[0]
    primary = h.reshape(batch, config.primary_capsule_count, config.primary_capsule_dim)
    u = squash(primary)
    values["primary.u"] = u
    predictions = np.einsum("bpd,pcdo->bpco", u, model.layers["routing"].params["weight"])
    caps = dynamic_routing(predictions, config.routing_iterations)

    x = caps.activities.reshape(batch, -1)
    names = decoder_names(config)
    for name in names:
        layer = model.layers[name].params
        values[f"{name}.in"] = x
        a = tc.dense_forward(x, layer["weight"], layer["bias"])
        values[f"{name}.out"] = a
        x = tc.relu(a) if name != "decoder_out" else tc.sigmoid(a)
    values["output"] = x
    lab = x.reshape(batch, LAB_CHANNELS, n, n)
    return lab, caps, ForwardCache(mode, values, bn_caches, caps)


def _forward_rows(model: ModelParams, gray: Tensor) -> tuple[Tensor, CapsuleSet, ForwardCache]:
    # one patch per call, so a patch colorizes bit-identically alone or inside any batch
    rows = [forward(model, gray[i:i + 1], "infer") for i in range(gray.shape[0])]
    first = rows[0][1]
    caps = CapsuleSet(
        np.concatenate([row[1].activities for row in rows]),
        np.concatenate([row[1].totals for row in rows]),
        np.concatenate([row[1].couplings for row in rows]),
        tuple(np.concatenate([row[1].coupling_trace[k] for row in rows]) for k in range(len(first.coupling_trace))))
    values = {key: np.concatenate([row[2].values[key] for row in rows]) for key in rows[0][2].values}
    return np.concatenate([row[0] for row in rows]), caps, ForwardCache("infer", values, {}, caps)


def backward(model: ModelParams, cache: ForwardCache, grad_lab: Tensor,
             grad_activities: Tensor | None = None) -> dict[str, Tensor]:
    """Gradients of the loss w.r.t. every trainable tensor, keyed like named_parameters()."""
    if cache.mode != "train" and model.config.batchnorm:
        raise ConfigurationError("backward requires a forward pass in train mode")
    config = model.config
    values = cache.values
    grads: dict[str, Tensor] = {}
    batch = grad_lab.shape[0]

    g = tc.sigmoid_backward(grad_lab.reshape(batch, -1), values["output"])
    for name in reversed(decoder_names(config)):
        layer = model.layers[name].params
        if name != "decoder_out":
            g = tc.relu_backward(g, values[f"{name}.out"])
        g, grads[f"{name}.weight"], grads[f"{name}.bias"] = tc.dense_backward(g, values[f"{name}.in"], layer["weight"])

    grad_caps = g.reshape(cache.caps.activities.shape)
    if grad_activities is not None:
        grad_caps = grad_caps + grad_activities
    grad_predictions = routing_backward(grad_caps, cache.caps)
    u = values["primary.u"]
    weight = model.layers["routing"].params["weight"]
    grads["routing.weight"] = np.einsum("bpd,bpco->pcdo", u, grad_predictions)
    grad_u = np.einsum("pcdo,bpco->bpd", weight, grad_predictions)
    primary = values["primary_conv.out"].reshape(u.shape)
    g = squash_backward(grad_u, primary).reshape(values["primary_conv.out"].shape)

    convs = detector_specs(config) + [("primary_conv", primary_spec(config))]
    for name, spec in reversed(convs):
        if name != "primary_conv":
            g = tc.relu_backward(g, values[f"{name}.out"])
        if config.batchnorm:
            bn = _bn_name(name)
            g, grads[f"{bn}.gamma"], grads[f"{bn}.beta"] = tc.batchnorm_backward(
                g, cache.bn_caches[bn], model.bn_state(bn))
        layer = model.layers[name].params
        g, grads[f"{name}.weight"], grads[f"{name}.bias"] = tc.conv2d_backward(
            g, values[f"{name}.in"], layer["weight"], spec)
    return grads


def updated_buffers(cache: ForwardCache) -> dict[str, Tensor]:
    """Running statistics produced by a train-mode forward pass."""
    updates = {}
    for bn, bn_cache in cache.bn_caches.items():
        updates[f"{bn}.running_mean"] = bn_cache.next_state.running_mean
        updates[f"{bn}.running_var"] = bn_cache.next_state.running_var
    return updates


# --- losses ---

def mse_loss(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Mean squared error over every batch, channel and pixel, with its gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def margin_loss(caps: CapsuleSet | Tensor, targets: Tensor, margin_lambda: float = 0.5,
                m_plus: float = 0.9, m_minus: float = 0.1) -> tuple[float, Tensor]:
    """Capsule margin loss summed over capsules and averaged over the batch.

    Args:
        caps: Routed capsules, or a raw activity tensor [batch, C, dim].
        targets (Tensor): 0/1 presence per capsule, shape [batch, C].

    Returns:
        tuple: (loss, gradient w.r.t. the activities).
    """
    activities = caps.activities if isinstance(caps, CapsuleSet) else caps
    if targets.shape != activities.shape[:2]:
        raise ShapeError(f"targets {targets.shape} do not match capsules {activities.shape[:2]}")
    lengths = np.linalg.norm(activities, axis=-1)
    present = np.maximum(0.0, m_plus - lengths)
    absent = np.maximum(0.0, lengths - m_minus)
    per_capsule = targets * present ** 2 + margin_lambda * (1.0 - targets) * absent ** 2
    batch = activities.shape[0]
    loss = float(per_capsule.sum() / batch)

    dlength = (-2.0 * targets * present + 2.0 * margin_lambda * (1.0 - targets) * absent) / batch
    direction = activities / np.maximum(lengths, SQUASH_EPS)[..., None]
    return loss, (dlength[..., None] * direction).astype(activities.dtype, copy=False)


def capsule_targets(lab: Tensor, num_capsules: int) -> Tensor:
    """One-hot capsule targets from the mean chroma angle of each normalized Lab patch.

    The angle atan2(b, a) of the raw-unit mean chroma is split into
    `num_capsules` equal sectors starting at -pi.
    """
    a = lab[:, 1].mean(axis=(1, 2)) * 255.0 - 128.0
    b = lab[:, 2].mean(axis=(1, 2)) * 255.0 - 128.0
    angle = np.arctan2(b, a)
    sector = np.floor((angle + np.pi) / (2.0 * np.pi) * num_capsules).astype(int)
    sector = np.clip(sector, 0, num_capsules - 1)
    targets = np.zeros((lab.shape[0], num_capsules), dtype=lab.dtype)
    targets[np.arange(lab.shape[0]), sector] = 1.0
    return targets


def compute_loss(model: ModelParams, gray: Tensor, lab: Tensor,
                 mode: tc.Mode = "train") -> tuple[float, dict[str, Tensor], ForwardCache]:
    """Forward pass, configured loss and full backward pass."""
    config = model.config
    pred, caps, cache = forward(model, gray, mode)
    loss, grad_lab = mse_loss(pred, lab)
    grad_activities = None
    if config.loss == "margin":
        targets = capsule_targets(lab, config.num_output_capsules)
        margin, grad_activities = margin_loss(caps, targets, config.margin_lambda)
        loss = margin + config.reconstruction_weight * loss
        grad_lab = config.reconstruction_weight * grad_lab
    grads = backward(model, cache, grad_lab, grad_activities)
    return loss, grads, cache


# --- optimization ---

def init_optimizer(model: ModelParams, lr: float = 0.001, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> dict[str, tc.AdamState]:
    return {name: tc.AdamState.zeros_like(value, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            for name, value in model.named_parameters().items()}


def train_step(model: ModelParams, optimizer: Mapping[str, tc.AdamState], gray: Tensor,
               lab: Tensor) -> tuple[ModelParams, dict[str, tc.AdamState], float]:
    """One forward/backward pass and an Adam update of every trainable tensor.

    Returns the new model, the new optimizer states and the pre-update batch
    loss. Batchnorm running statistics advance as well, unless every learning
    rate is zero: then the returned model equals the input model.
    """
    if gray.shape[0] != lab.shape[0]:
        raise ShapeError(f"gray batch has {gray.shape[0]} samples, lab batch has {lab.shape[0]}")
    loss, grads, cache = compute_loss(model, gray, lab, "train")
    frozen = all(state.lr == 0.0 for state in optimizer.values())
    updates = {} if frozen else updated_buffers(cache)
    new_optimizer = {}
    for name, param in model.named_parameters().items():
        updates[name], new_optimizer[name] = tc.adam_step(param, grads[name], optimizer[name])
    logger.debug(f"train_step loss={loss:.6f}")
    return model.replace(updates), new_optimizer, loss


def colorize_patches(model: ModelParams, gray: Tensor, batch_size: int = 64) -> Tensor:
    """Infer-mode prediction for any number of patches, in input order."""
    outputs = [forward(model, gray[start:start + batch_size], "infer")[0]
               for start in range(0, gray.shape[0], batch_size)]
    if not outputs:
        n = model.config.patch_size
        return np.zeros((0, LAB_CHANNELS, n, n), dtype=gray.dtype)
    return np.concatenate(outputs, axis=0)


# --- gradient integrity ---

def end_to_end_gradcheck(config: ColorCapsNetConfig | None = None, seed: int = 0, batch: int = 2,
                         max_coords: int | None = 16, step: float = 1e-6) -> float:
    """Worst relative error between backward() and finite differences of the loss.

    Runs in float64 on random inputs. The small default step keeps
    perturbations from straddling ReLU and hinge kinks.
    """
    config = config or reduced_config()
    rng = np.random.default_rng(seed)
    model = build_model(config, seed=seed).astype(np.float64)
    n = config.patch_size
    gray = rng.uniform(0.0, 1.0, size=(batch, 1, n, n))
    lab = rng.uniform(0.0, 1.0, size=(batch, LAB_CHANNELS, n, n))

    def objective(params):
        candidate = model.replace(params)
        loss, grads, _ = compute_loss(candidate, gray, lab, "train")
        return loss, grads

    worst = tc.gradcheck(objective, model.named_parameters(), step=step, max_coords=max_coords, seed=seed)
    logger.info(f"End-to-end gradcheck worst relative error: {worst:.3e}")
    return worst
