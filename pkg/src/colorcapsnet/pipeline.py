# pipeline.py
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
import os
import time

import numpy as np
from pydantic import ValidationError

from colorcapsnet import capsnet, checkpoint
from colorcapsnet.capsnet import ColorCapsNetConfig, ModelParams
from colorcapsnet.colorspace import image_normalized_lab_to_rgb
from colorcapsnet.config import RunConfig
from colorcapsnet.data_io import PairStats, build_pairs, load_manifest, scan_pairs, shuffle_batches, stack_batch
from colorcapsnet.errors import CheckpointError, ShapeError
from colorcapsnet.patches import reassemble, slice_image
from colorcapsnet.tensor_core import AdamState

logger = logging.getLogger(__name__)

LOSS_LOG = "loss.csv"
LATEST = "latest.ccps"


@dataclasses.dataclass
class TrainingState:
    model: ModelParams
    optimizer: dict[str, AdamState]
    epoch: int = 0
    seed: int = 0
    stage: int = 1
    manifest: str | None = None


def to_checkpoint(state: TrainingState) -> checkpoint.Checkpoint:
    """Flattens weights, running statistics and Adam moments into one container."""
    tensors = dict(state.model.named_tensors())
    any_adam = next(iter(state.optimizer.values()))
    for name, adam in state.optimizer.items():
        tensors[f"adam.{name}.m"] = adam.m
        tensors[f"adam.{name}.v"] = adam.v
    metadata = {
        "config": state.model.config.model_dump_json(),
        "epoch": str(state.epoch),
        "seed": str(state.seed),
        "stage": str(state.stage),
        "manifest": state.manifest or "",
        "adam.t": str(any_adam.t),
        "adam.lr": repr(any_adam.lr),
        "adam.beta1": repr(any_adam.beta1),
        "adam.beta2": repr(any_adam.beta2),
        "adam.eps": repr(any_adam.eps),
    }
    return checkpoint.Checkpoint.from_tensors(tensors, metadata)


def stored_config(ckpt: checkpoint.Checkpoint) -> ColorCapsNetConfig:
    if "config" not in ckpt.metadata:
        raise CheckpointError("checkpoint carries no model configuration")
    try:
        return ColorCapsNetConfig.model_validate_json(ckpt.metadata["config"])
    except ValidationError as e:
        raise CheckpointError(f"checkpoint configuration is invalid: {e}")


def from_checkpoint(ckpt: checkpoint.Checkpoint) -> TrainingState:
    meta = ckpt.metadata
    config = stored_config(ckpt)
    tensors = ckpt.tensors()
    skeleton = capsnet.build_model(config, seed=0)
    missing = [name for name in skeleton.named_tensors() if name not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks model tensors: {', '.join(missing)}")
    misshaped = [f"{name} {list(tensors[name].shape)} != {list(value.shape)}"
                 for name, value in skeleton.named_tensors().items() if tensors[name].shape != value.shape]
    if misshaped:
        raise CheckpointError(f"checkpoint tensors do not fit the stored configuration: {'; '.join(misshaped)}")
    model = skeleton.replace({name: tensors[name] for name in skeleton.named_tensors()})

    hyper = dict(lr=float(meta.get("adam.lr", 0.001)), beta1=float(meta.get("adam.beta1", 0.9)),
                 beta2=float(meta.get("adam.beta2", 0.999)), eps=float(meta.get("adam.eps", 1e-8)))
    t = int(meta.get("adam.t", 0))
    optimizer = {}
    for name, param in model.named_parameters().items():
        m, v = tensors.get(f"adam.{name}.m"), tensors.get(f"adam.{name}.v")
        if m is None or v is None:
            optimizer[name] = AdamState.zeros_like(param, **hyper)
        else:
            optimizer[name] = AdamState(m=m, v=v, t=t, **hyper)
    return TrainingState(model, optimizer, epoch=int(meta.get("epoch", 0)), seed=int(meta.get("seed", 0)),
                         stage=int(meta.get("stage", 1)), manifest=meta.get("manifest") or None)


def load_model(path: str) -> ModelParams:
    return from_checkpoint(checkpoint.load(path)).model


def initial_state(run: RunConfig) -> TrainingState:
    """Fresh or resumed training state for `run`."""
    manifest = os.path.abspath(run.manifest) if run.manifest else None
    if run.resume:
        state = from_checkpoint(checkpoint.load(run.resume))
        state.optimizer = {name: dataclasses.replace(adam, lr=run.lr, beta1=run.beta1, beta2=run.beta2,
                                                     eps=run.adam_eps)
                           for name, adam in state.optimizer.items()}
        if manifest and state.manifest and manifest != state.manifest:
            # new corpus: next training stage, epoch counter restarts
            state.stage += 1
            state.epoch = 0
            logger.info(f"Resuming into stage {state.stage} on {manifest}")
        state.manifest = manifest or state.manifest
        return state

    vgg = checkpoint.load(run.vgg_weights) if run.vgg_weights else None
    model = capsnet.build_model(run.network(), seed=run.seed, vgg_weights=vgg)
    optimizer = capsnet.init_optimizer(model, lr=run.lr, beta1=run.beta1, beta2=run.beta2, eps=run.adam_eps)
    return TrainingState(model, optimizer, epoch=0, seed=run.seed, manifest=manifest)


def train_epoch(state: TrainingState, pairs: list, batch_size: int) -> tuple[TrainingState, float]:
    """One shuffled pass; returns the new state and the sample-weighted mean batch loss."""
    epoch = state.epoch + 1
    model, optimizer = state.model, state.optimizer
    total, seen = 0.0, 0
    for batch in shuffle_batches(pairs, batch_size, state.seed, epoch):
        gray, lab = stack_batch(batch)
        model, optimizer, loss = capsnet.train_step(model, optimizer, gray, lab)
        total += loss * len(batch)
        seen += len(batch)
    mean_loss = total / seen if seen else float("nan")
    return dataclasses.replace(state, model=model, optimizer=optimizer, epoch=epoch), mean_loss


def _save_epoch(state: TrainingState, out_dir: str) -> None:
    ckpt = to_checkpoint(state)
    checkpoint.save(os.path.join(out_dir, f"epoch_{state.epoch:04d}.ccps"), ckpt)
    checkpoint.save(os.path.join(out_dir, LATEST), ckpt)


def run_training(run: RunConfig) -> TrainingState:
    """Trains up to `run.epochs` (counted within the current stage).

    Writes a checkpoint per epoch plus `latest.ccps`, and appends
    `epoch,mean_loss[,seconds]` rows to `loss.csv`.
    """
    state = initial_state(run)
    pairs: list = []
    if run.manifest:
        manifest = load_manifest(run.manifest)
        stats = PairStats()
        pairs = list(build_pairs(manifest, n=state.model.config.patch_size, stats=stats))
        scanned = scan_pairs(pairs)
        logger.info(f"Built and scanned {scanned} patch pairs from {stats.records} record(s), skipped {stats.skipped}")
    if run.epochs > state.epoch and not pairs:
        raise ShapeError("training needs at least one patch pair")

    os.makedirs(run.out_dir, exist_ok=True)
    log_path = os.path.join(run.out_dir, LOSS_LOG)
    if not (run.resume and os.path.exists(log_path)):
        with open(log_path, "w") as f:
            f.write("epoch,mean_loss,seconds\n" if run.timing else "epoch,mean_loss\n")
    if state.epoch == 0:
        _save_epoch(state, run.out_dir)

    while state.epoch < run.epochs:
        started = time.perf_counter()
        state, mean_loss = train_epoch(state, pairs, run.batch_size)
        elapsed = time.perf_counter() - started
        _save_epoch(state, run.out_dir)
        row = f"{state.epoch},{mean_loss:.10g}" + (f",{elapsed:.4f}" if run.timing else "")
        with open(log_path, "a") as f:
            f.write(row + "\n")
        logger.info(f"Epoch {state.epoch}/{run.epochs} mean loss {mean_loss:.6f} ({elapsed:.2f}s)")
    return state


def colorize_image(model: ModelParams, gray: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """8-bit grayscale [1, H, W] -> 8-bit RGB [3, H, W] through the patch pipeline."""
    if gray.ndim != 3 or gray.shape[0] != 1:
        raise ShapeError(f"expected a grayscale image [1, H, W], got {gray.shape}")
    plane = gray.astype(np.float32) / 255.0
    patches, grid = slice_image(plane, model.config.patch_size)
    predicted = capsnet.colorize_patches(model, patches, batch_size)
    lab = reassemble(predicted, grid)
    return image_normalized_lab_to_rgb(lab)
