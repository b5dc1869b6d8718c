"""
Training orchestration: batch preparation from frame pairs, the AdamW update,
learning-rate and momentum schedules, the checkpointed training loop, the
frozen-feature linear probe and the ablation grid.
"""

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Protocol, Sequence

import numpy as np
from loguru import logger
from sklearn.metrics import confusion_matrix
from tqdm import tqdm

from library import utils
from library.cropping import (
    CropSpec,
    SubcropSampler,
    extract_resize,
    jitter_crop,
    sample_global_crop_pair,
)
from library.exceptions import CheckpointDigestError, NonFiniteLossError, ParameterError
from library.flow import FlowField, crop_flow, occlusion_mask
from library.geometry import (
    AffineConfig,
    PhotometricConfig,
    apply_affine,
    apply_photometric,
    sample_affine,
    sample_photometric,
)
from library.losses import LossReport, PreparedBatch, symmetrized_total
from library.network import (
    ModelConfig,
    ModelState,
    config_dict,
    dense_features,
    ema_update,
    init_state,
    load_checkpoint,
    save_checkpoint,
    state_arrays,
    state_from_arrays,
)
from library.synth import FramePairSample
from library.tasks import BatchPrefetcher
from library.tensor import Tape, Tensor, bilinear_resize, conv2d, cross_entropy
from library.types import AblationFlag, AreaMode, ablation_flags

METRICS_NAME = "metrics.csv"
METRICS_COLUMNS = ["step", "lr", "momentum", "dense", "pooled", "total", "valid_frac", "occ_frac"]
ABLATION_NAME = "ablation.csv"

# Ablation rows, from the dense-only baseline with a dilated trunk to the full model.
ABLATION_ROWS: dict[str, tuple[AblationFlag, ...]] = {
    "dense_only": ("pool", "topdown", "lateral"),
    "dense_pool": ("topdown", "lateral"),
    "dense_topdown": ("pool", "lateral"),
    "dense_lateral": ("pool", "topdown"),
    "dense_sdm": ("pool",),
    "full": (),
}


class Dataset(Protocol):
    def __len__(self) -> int:
        ...

    def __getitem__(self, index: int) -> FramePairSample:
        ...


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    epochs: int = 32
    max_steps: int = 0
    base_lr: float = 5e-4
    weight_decay: float = 0.01
    warmup_epochs: float = 2.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    base_momentum: float = 0.996
    dt_range: tuple[int, int] = (1, 3)
    global_area_range: tuple[float, float] = (0.16, 0.45)
    global_area_mode: AreaMode = "uniform"
    global_area_sigma: float = 0.1
    global_size: tuple[int, int] = (64, 128)
    num_subcrops: int = 6
    subcrop_area_range: tuple[float, float] = (0.05, 0.3)
    subcrop_aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    subcrop_size: int = 48
    subcrop_jitter: float = 0.1
    subcrop_attempts: int = 3
    static_crop_jitter: float = 0.0
    repeat_samples: int = 1
    alpha1: float = 0.1
    alpha2: float = 0.5
    affine: AffineConfig = field(default_factory=AffineConfig)
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig)
    ablate: tuple[AblationFlag, ...] = ()
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_every: int = 500
    prefetch_depth: int = 2

    def __post_init__(self) -> None:
        unknown = [flag for flag in self.ablate if flag not in ablation_flags]
        if unknown:
            raise ParameterError(
                f"Unknown ablation flag(s) {unknown}. Valid flags: {', '.join(ablation_flags)}."
            )
        if "dense" in self.ablate and "pool" in self.ablate:
            raise ParameterError("Ablating both the dense and the pooled loss leaves nothing to train.")
        if self.batch_size < 1 or self.epochs < 1 or self.repeat_samples < 1:
            raise ParameterError("batch_size, epochs and repeat_samples must be positive.")
        if self.max_steps < 0:
            raise ParameterError(f"max_steps must be non-negative, got {self.max_steps}.")

    @property
    def use_dense(self) -> bool:
        return "dense" not in self.ablate

    @property
    def use_pool(self) -> bool:
        return "pool" not in self.ablate

    @property
    def model_config(self) -> ModelConfig:
        """
        The architecture after ablations. Weights are initialized from the run seed.
        """

        return replace(
            self.model,
            topdown="topdown" not in self.ablate,
            lateral="lateral" not in self.ablate,
            init_seed=self.seed,
        )

    def with_ablations(self, flags: Sequence[AblationFlag]) -> "TrainConfig":
        return replace(self, ablate=tuple(flags))

    def steps_per_epoch(self, samples: int) -> int:
        return max(1, samples * self.repeat_samples // self.batch_size)

    def total_steps(self, samples: int) -> int:
        total = self.epochs * self.steps_per_epoch(samples)
        return min(total, self.max_steps) if self.max_steps else total

    def to_dict(self) -> dict:
        return asdict(self)


def model_digest(config: ModelConfig) -> str:
    """
    Digest of the architecture a checkpoint belongs to. The init seed is left out.
    """

    payload = config_dict(config)
    payload.pop("init_seed", None)
    return utils.digest(payload)


# ----------------------------------------------------------------------------------------
# Batches


def read_checkpoint(path: str, config: ModelConfig) -> tuple[dict[str, np.ndarray], int]:
    """
    Load a checkpoint and check that it was written for `config`.

    Raises
    ------
    `CheckpointDigestError` :
        The stored digest differs from the digest of `config`.
    """

    arrays, digest, step = load_checkpoint(path)
    expected = model_digest(config)
    if digest != expected:
        utils.log_error(
            "checkpoint-digest-mismatch",
            "Checkpoint does not match the model config",
            message=path,
            metadata={"expected": expected, "provided": digest},
        )
        raise CheckpointDigestError(expected, digest)

    return arrays, step


def load_model(path: str, config: ModelConfig, base_momentum: float = 0.996) -> ModelState:
    arrays, step = read_checkpoint(path, config)
    model_arrays = {name: value for name, value in arrays.items() if not name.startswith("adam_")}
    state = state_from_arrays(config, model_arrays, step)
    state.momentum = base_momentum
    return state


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 1])


def epoch_order(seed: int, epoch: int, samples: int, repeats: int = 1) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0]).permutation(samples * repeats) % samples


def batch_indices(config: TrainConfig, samples: int, step: int) -> np.ndarray:
    per_epoch = config.steps_per_epoch(samples)
    epoch, position = divmod(step, per_epoch)
    order = epoch_order(config.seed, epoch, samples, config.repeat_samples)

    if samples * config.repeat_samples < config.batch_size:
        return order

    return order[position * config.batch_size : (position + 1) * config.batch_size]


def _crop_mask(mask: np.ndarray, crop: CropSpec, out_h: int, out_w: int) -> np.ndarray:
    resampled = extract_resize(mask[None].astype(np.float32), crop, out_h, out_w)
    return resampled[0] > 0.5


def prepare_batch(
    samples: Sequence[FramePairSample],
    config: TrainConfig,
    rng: np.random.Generator,
    sampler: Optional[SubcropSampler] = None,
) -> PreparedBatch:
    """
    Crop, augment and pair a list of frame pairs.

    Every sample gets one global crop shared by both frames (shifted for the
    second frame when `static_crop_jitter` applies to a static pair), cropped
    flows in both directions, occlusion from the forward-backward check,
    independent photometric parameters per frame and an independent affine per
    view. Subcrop pairs are drawn from the photometrically augmented crops with
    flow-informed centers.

    Parameters
    ----------
    - `samples` : Sequence[FramePairSample]
    - `config` : TrainConfig
    - `rng` : np.random.Generator
        Every random draw of the batch comes from this generator.
    - `sampler` : Optional[SubcropSampler]
        Ignored when the pooled loss is off; no subcrops are drawn then.
    """

    if not config.use_pool:
        sampler = None

    out_h, out_w = config.global_size
    size = config.subcrop_size
    two_way = all(sample.flow_bwd is not None for sample in samples)

    views_t, views_t_plus = [], []
    aug_t, aug_t_plus = [], []
    flows_fwd, flows_bwd, occ_fwd, occ_bwd = [], [], [], []
    subs_t, subs_t_plus = [], []

    for sample in samples:
        height, width = sample.frame_t.shape[1:]
        crop = sample_global_crop_pair(
            rng,
            height,
            width,
            config.global_area_range,
            out_h,
            out_w,
            area_mode=config.global_area_mode,
            area_sigma=config.global_area_sigma,
        )
        crop_plus = crop
        if sample.dt == 0 and config.static_crop_jitter > 0:
            crop_plus = jitter_crop(rng, crop, config.static_crop_jitter)

        flow_fwd = crop_flow(sample.flow_fwd, crop, out_h, out_w, target=crop_plus)
        flows_fwd.append(flow_fwd)

        if two_way:
            flow_bwd = crop_flow(sample.flow_bwd, crop_plus, out_h, out_w, target=crop)
            flows_bwd.append(flow_bwd)
            occ_fwd.append(occlusion_mask(flow_fwd, flow_bwd, config.alpha1, config.alpha2))
            occ_bwd.append(occlusion_mask(flow_bwd, flow_fwd, config.alpha1, config.alpha2))
        elif sample.occlusion_fwd is not None:
            occ_fwd.append(_crop_mask(sample.occlusion_fwd, crop, out_h, out_w))
        else:
            occ_fwd.append(np.zeros((out_h, out_w), dtype=bool))

        photo_t = apply_photometric(
            extract_resize(sample.frame_t, crop, out_h, out_w)[None],
            sample_photometric(rng, config.photometric),
        )[0]
        photo_t_plus = apply_photometric(
            extract_resize(sample.frame_t_plus, crop_plus, out_h, out_w)[None],
            sample_photometric(rng, config.photometric),
        )[0]
        views_t.append(photo_t)
        views_t_plus.append(photo_t_plus)

        aug_t.append(sample_affine(rng, config.affine, out_h, out_w))
        aug_t_plus.append(sample_affine(rng, config.affine, out_h, out_w))

        if sampler is not None:
            for pair in sampler.sample(rng, flow_fwd):
                subs_t.append(extract_resize(photo_t, pair.crop_t, size, size))
                subs_t_plus.append(extract_resize(photo_t_plus, pair.crop_t_plus, size, size))

    warped_t, _ = apply_affine(Tensor(np.stack(views_t)), aug_t)
    warped_t_plus, _ = apply_affine(Tensor(np.stack(views_t_plus)), aug_t_plus)

    if sampler is not None and not subs_t:
        utils.log_error(
            "subcrop-rejected",
            "No subcrop pair survived",
            message=f"Every grid cell of {len(samples)} sample(s) was rejected.",
            metadata={"calls": sampler.calls, "rejections": sampler.rejections},
        )

    empty = np.zeros((0, 3, size, size), dtype=np.float32)
    return PreparedBatch(
        view_t=warped_t.data,
        view_t_plus=warped_t_plus.data,
        aug_t=aug_t,
        aug_t_plus=aug_t_plus,
        flow_fwd=flows_fwd,
        flow_bwd=flows_bwd if two_way else None,
        occ_fwd=occ_fwd,
        occ_bwd=occ_bwd if two_way else None,
        sub_t=np.stack(subs_t) if subs_t else (empty if sampler is not None else None),
        sub_t_plus=np.stack(subs_t_plus) if subs_t_plus else (empty if sampler is not None else None),
    )


# ----------------------------------------------------------------------------------------
# Optimization


def decays(name: str) -> bool:
    """
    Decoupled weight decay applies to convolution and linear weights only.
    """

    return name.endswith(".weight")


class AdamW:

    """
    Adam with decoupled weight decay over a dictionary of named parameters.
    Parameters without a gradient in a step are left untouched.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0

        self.m = {name: np.zeros_like(tensor.data) for name, tensor in params.items()}
        self.v = {name: np.zeros_like(tensor.data) for name, tensor in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        beta1, beta2 = self.betas
        correction1 = 1 - beta1**self.t
        correction2 = 1 - beta2**self.t

        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue

            grad = tensor.grad
            m, v = self.m[name], self.v[name]
            m *= beta1
            m += (1 - beta1) * grad
            v *= beta2
            v += (1 - beta2) * grad * grad

            if self.weight_decay and decays(name):
                tensor.data -= np.float32(lr * self.weight_decay) * tensor.data

            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            tensor.data -= np.float32(lr) * update.astype(tensor.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"adam_m/{name}": value for name, value in self.m.items()}
        arrays.update({f"adam_v/{name}": value for name, value in self.v.items()})
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        """
        Restore the moments. The update count `t` equals the training step and
        travels in the checkpoint header rather than as a float32 record.
        """

        for name in self.m:
            self.m[name] = arrays[f"adam_m/{name}"].copy()
            self.v[name] = arrays[f"adam_v/{name}"].copy()

        self.t = t


def learning_rate(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """
    Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay to 0
    at `total_steps`.
    """

    warmup_steps = min(warmup_steps, total_steps)
    if step < warmup_steps:
        return base_lr * step / warmup_steps

    decay_steps = total_steps - warmup_steps
    if decay_steps <= 0:
        return base_lr

    progress = min((step - warmup_steps) / decay_steps, 1.0)
    return base_lr * 0.5 * (1 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    steps_per_epoch: int
    warmup_epochs: float
    base_lr: float

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.steps_per_epoch))

    def lr_at(self, step: int) -> float:
        return learning_rate(step, self.total_steps, self.warmup_steps, self.base_lr)


@dataclass
class StepResult:
    report: LossReport
    lr: float
    momentum: float

    def row(self, step: int) -> list:
        report = self.report
        return [
            step,
            repr(self.lr),
            repr(self.momentum),
            repr(report.dense),
            repr(report.pooled),
            repr(report.total),
            repr(report.valid_frac),
            repr(report.occ_frac),
        ]


def train_step(
    state: ModelState,
    optimizer: AdamW,
    batch: PreparedBatch,
    config: TrainConfig,
    step: int,
    schedule: Schedule,
) -> StepResult:
    """
    One optimization step: symmetrized loss, backward pass, AdamW update on the
    online parameters, then the moving-average update of the offline branch.

    Raises
    ------
    `NonFiniteLossError` :
        The loss is NaN or infinite. Nothing is updated.
    """

    state.zero_grad()
    with Tape() as tape:
        total, report = symmetrized_total(state, batch, use_dense=config.use_dense, use_pool=config.use_pool)

        if not math.isfinite(report.total):
            stats = {
                "dense": report.dense,
                "pooled": report.pooled,
                "valid_frac": report.valid_frac,
                "occ_frac": report.occ_frac,
                "pairs": report.pairs,
                "flags": report.flags,
            }
            utils.log_error(
                "non-finite-loss", f"Non-finite loss at step {step}", message=str(stats), metadata=stats
            )
            raise NonFiniteLossError(step, stats)

        if total.requires_grad:
            tape.backward(total)
        tape.clear()

    lr = schedule.lr_at(step)
    optimizer.step(lr)
    momentum = ema_update(state, step, schedule.total_steps)
    state.step = step + 1

    return StepResult(report, lr, momentum)


# ----------------------------------------------------------------------------------------
# Training loop


class Trainer:

    """
    Runs training over a dataset and writes `metrics.csv` plus checkpoints into
    `out_dir`. Batches are prepared ahead of the optimization step on a
    background thread. Each batch depends only on the seed and the step index,
    so a resumed run continues exactly where the uninterrupted one would be.
    """

    def __init__(
        self,
        config: TrainConfig,
        dataset: Dataset,
        out_dir: str,
        progress: bool = True,
    ) -> None:
        if len(dataset) == 0:
            raise ParameterError("Cannot train on an empty dataset.")

        self.config = config
        self.dataset = dataset
        self.out_dir = out_dir
        self.progress = progress

        self.model_config = config.model_config
        self.digest = model_digest(self.model_config)
        self.state = init_state(self.model_config, config.base_momentum)
        self.optimizer = AdamW(self.state.online, config.weight_decay, config.betas, config.adam_eps)
        self.sampler = (
            SubcropSampler(
                config.num_subcrops,
                area_range=config.subcrop_area_range,
                aspect_range=config.subcrop_aspect_range,
                jitter=config.subcrop_jitter,
                attempts=config.subcrop_attempts,
            )
            if config.use_pool
            else None
        )
        self.schedule = Schedule(
            total_steps=config.total_steps(len(dataset)),
            steps_per_epoch=config.steps_per_epoch(len(dataset)),
            warmup_epochs=config.warmup_epochs,
            base_lr=config.base_lr,
        )
        self.history: list[StepResult] = []

        os.makedirs(out_dir, exist_ok=True)

    @property
    def step(self) -> int:
        return self.state.step

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.out_dir, METRICS_NAME)

    def checkpoint_path(self, step: int) -> str:
        return os.path.join(self.out_dir, f"checkpoint_{step:06d}.ckpt")

    def batch_for_step(self, step: int) -> PreparedBatch:
        indices = batch_indices(self.config, len(self.dataset), step)
        samples = [self.dataset[int(index)] for index in indices]
        return prepare_batch(samples, self.config, step_rng(self.config.seed, step), self.sampler)

    def save(self, path: Optional[str] = None) -> str:
        path = path or self.checkpoint_path(self.step)
        arrays = state_arrays(self.state)
        arrays.update(self.optimizer.state_arrays())
        save_checkpoint(path, arrays, self.digest, self.step)

        logger.info(f"Checkpoint for step {self.step} written to '{path}'.")
        return path

    def resume(self, path: str) -> None:
        """
        Restore parameters, moving averages, normalization buffers, optimizer
        moments and the step from a checkpoint written by `save`.
        """

        arrays, step = read_checkpoint(path, self.model_config)
        model_arrays = {name: value for name, value in arrays.items() if not name.startswith("adam_")}
        self.state = state_from_arrays(self.model_config, model_arrays, step)
        self.state.momentum = self.config.base_momentum
        self.optimizer = AdamW(self.state.online, self.config.weight_decay, self.config.betas, self.config.adam_eps)
        self.optimizer.load_state_arrays(arrays, step)

        logger.info(f"Resumed from '{path}' at step {step}.")

    def _keep_metrics_before(self, step: int) -> None:
        """
        Drop metric rows at or after `step`, which a resumed run writes again.
        """

        with open(self.metrics_path, newline="", encoding="utf-8") as file:
            rows = list(csv.reader(file))

        kept = [row for row in rows[1:] if row and int(row[0]) < step]
        if len(kept) == len(rows) - 1:
            return

        with open(self.metrics_path, "w", newline="", encoding="utf-8") as file:
            writer = csv.writer(file)
            writer.writerow(METRICS_COLUMNS)
            writer.writerows(kept)

        logger.info(f"Dropped {len(rows) - 1 - len(kept)} metric row(s) logged after step {step}.")

    def run(self, until: Optional[int] = None) -> ModelState:
        """
        Train up to step `until` (the schedule's total by default), appending to
        the metrics CSV and checkpointing every `checkpoint_every` steps and at
        the end.
        """

        stop = min(until if until is not None else self.schedule.total_steps, self.schedule.total_steps)
        if self.step >= stop:
            return self.state

        logger.info(
            f"Training steps {self.step}..{stop} of {self.schedule.total_steps} "
            f"({self.schedule.steps_per_epoch} per epoch, ablated: {list(self.config.ablate) or 'none'})."
        )
        st = time.perf_counter()

        fresh = not os.path.exists(self.metrics_path) or self.step == 0
        if not fresh:
            self._keep_metrics_before(self.step)
        prefetcher = BatchPrefetcher(self.batch_for_step, range(self.step, stop), self.config.prefetch_depth)

        with open(self.metrics_path, "w" if fresh else "a", newline="", encoding="utf-8") as file, tqdm(
            total=stop, initial=self.step, desc="train", disable=not self.progress
        ) as bar:
            writer = csv.writer(file)
            if fresh:
                writer.writerow(METRICS_COLUMNS)

            for step, batch in prefetcher:
                result = train_step(self.state, self.optimizer, batch, self.config, step, self.schedule)
                self.history.append(result)
                writer.writerow(result.row(step))

                bar.update(1)
                bar.set_postfix(loss=f"{result.report.total:.4f}")

                if self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0 and self.step < stop:
                    file.flush()
                    self.save()

        self.save()

        tt = round(time.perf_counter() - st, 2)
        utils.log_time_metric("train", tt, title=f"steps {stop}", message=self.out_dir)
        logger.info(f"Training finished in {tt} seconds.")
        if self.sampler is not None:
            logger.info(f"Subcrop sampler: {self.sampler.calls} call(s), {self.sampler.rejections} rejected cell(s).")

        return self.state


# ----------------------------------------------------------------------------------------
# Linear probe


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 16
    height: int = 64
    width: int = 128
    eval_fraction: float = 0.25
    num_classes: int = 6
    seed: int = 0
    feature_batch: int = 8

    def __post_init__(self) -> None:
        if not 0 < self.eval_fraction < 1:
            raise ParameterError(f"eval_fraction must be in (0, 1), got {self.eval_fraction}.")
        if self.num_classes < 2:
            raise ParameterError("A probe needs at least two classes.")


@dataclass
class ProbeResult:

    """
    Held-out segmentation quality. Classes without ground-truth pixels in the
    eval split have IoU None and stay out of both means.
    """

    per_class_iou: list[Optional[float]]
    miou: float
    acc: float
    fg_miou: float
    notes: list[str] = field(default_factory=list)

    def row(self, tag: str) -> list[str]:
        cells = ["NA" if iou is None else repr(iou) for iou in self.per_class_iou]
        return [tag, repr(self.miou), repr(self.acc), repr(self.fg_miou), *cells]

    @staticmethod
    def header(num_classes: int) -> list[str]:
        return ["tag", "miou", "acc", "fg_miou", *(f"iou_{index}" for index in range(num_classes))]


def evaluate_predictions(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> ProbeResult:
    """
    Per-class IoU from the confusion matrix, `TP / (TP + FP + FN)`.
    """

    matrix = confusion_matrix(labels.ravel(), predictions.ravel(), labels=list(range(num_classes)))
    tp = np.diag(matrix).astype(np.float64)
    support = matrix.sum(axis=1)
    union = support + matrix.sum(axis=0) - tp

    per_class: list[Optional[float]] = []
    notes = []
    for index in range(num_classes):
        if support[index] == 0:
            per_class.append(None)
            notes.append(f"class {index} absent from the eval split")
            continue

        per_class.append(float(tp[index] / union[index]))

    present = [iou for iou in per_class if iou is not None]
    foreground = [iou for index, iou in enumerate(per_class) if index > 0 and iou is not None]

    return ProbeResult(
        per_class_iou=per_class,
        miou=float(np.mean(present)) if present else 0.0,
        acc=float(tp.sum() / max(matrix.sum(), 1)),
        fg_miou=float(np.mean(foreground)) if foreground else 0.0,
        notes=notes,
    )


def probe_inputs(dataset: Dataset, config: ProbeConfig) -> tuple[np.ndarray, np.ndarray]:
    """
    Frames t resized to the probe resolution, with nearest-neighbour labels.
    """

    images, labels = [], []
    for index in range(len(dataset)):
        sample = dataset[index]
        height, width = sample.labels_t.shape

        images.append(extract_resize(sample.frame_t, CropSpec.full(height, width), config.height, config.width))

        rows = np.minimum(((np.arange(config.height) + 0.5) * height / config.height).astype(int), height - 1)
        cols = np.minimum(((np.arange(config.width) + 0.5) * width / config.width).astype(int), width - 1)
        labels.append(sample.labels_t[np.ix_(rows, cols)])

    return np.stack(images), np.stack(labels).astype(np.int64)


def extract_features(state: ModelState, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """
    Frozen dense features of the online branch, with the decoder retained.
    """

    weights = state.online_weights("eval")
    chunks = []
    for start in range(0, images.shape[0], batch):
        features, _ = dense_features(state.config, weights, Tensor(images[start : start + batch]))
        chunks.append(features.data)

    return np.concatenate(chunks)


def fit_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    eval_features: np.ndarray,
    eval_labels: np.ndarray,
    config: ProbeConfig,
) -> ProbeResult:
    """
    Train a 1x1 convolution on frozen features with pixelwise cross-entropy.
    Logits are bilinearly upsampled to the label resolution. The classifier
    starts at zero and batches follow a seeded permutation, so the result is
    deterministic.
    """

    channels = train_features.shape[1]
    height, width = train_labels.shape[1:]
    weight = Tensor(np.zeros((config.num_classes, channels, 1, 1), dtype=np.float32), requires_grad=True, name="probe.weight")
    bias = Tensor(np.zeros(config.num_classes, dtype=np.float32), requires_grad=True, name="probe.bias")
    optimizer = AdamW({"probe.weight": weight, "probe.bias": bias}, weight_decay=0.0)
    rng = np.random.default_rng(config.seed)

    def logits(features: np.ndarray) -> Tensor:
        return bilinear_resize(conv2d(Tensor(features), weight, bias), height, width)

    for _ in range(config.epochs):
        order = rng.permutation(train_features.shape[0])
        for start in range(0, len(order), config.batch_size):
            chosen = order[start : start + config.batch_size]
            weight.zero_grad()
            bias.zero_grad()
            with Tape() as tape:
                loss = cross_entropy(logits(train_features[chosen]), train_labels[chosen])
                tape.backward(loss)
            optimizer.step(config.lr)

    predictions = []
    for start in range(0, eval_features.shape[0], config.batch_size):
        predictions.append(logits(eval_features[start : start + config.batch_size]).data.argmax(axis=1))

    return evaluate_predictions(np.concatenate(predictions), eval_labels, config.num_classes)


def split_counts(samples: int, eval_fraction: float) -> tuple[int, int]:
    n_eval = max(1, int(round(samples * eval_fraction)))
    n_train = samples - n_eval
    if n_train < 1:
        raise ParameterError(f"{samples} sample(s) cannot be split into train and eval sets.")

    return n_train, n_eval


def linear_probe(state: ModelState, dataset: Dataset, config: ProbeConfig) -> ProbeResult:
    """
    Linear readout of a frozen model. The last `eval_fraction` of the dataset is
    held out for evaluation.
    """

    st = time.perf_counter()
    n_train, _ = split_counts(len(dataset), config.eval_fraction)

    images, labels = probe_inputs(dataset, config)
    features = extract_features(state, images, config.feature_batch)
    result = fit_probe(features[:n_train], labels[:n_train], features[n_train:], labels[n_train:], config)

    tt = round(time.perf_counter() - st, 2)
    utils.log_time_metric("probe", tt, message=f"miou {result.miou:.4f}")
    logger.info(f"Probe finished in {tt} seconds: mIoU {result.miou:.4f}, acc {result.acc:.4f}.")
    for note in result.notes:
        logger.warning(f"Probe: {note}.")

    return result


def write_probe_csv(rows: Sequence[tuple[str, ProbeResult]], path: str, num_classes: int) -> str:
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file)
        writer.writerow(ProbeResult.header(num_classes))
        for tag, result in rows:
            writer.writerow(result.row(tag))

    return path


# ----------------------------------------------------------------------------------------
# Ablations


@dataclass
class AblationRow:
    name: str
    ablate: tuple[AblationFlag, ...]
    result: ProbeResult


def run_ablation_grid(
    config: TrainConfig,
    dataset: Dataset,
    probe_config: ProbeConfig,
    out_dir: str,
    rows: Optional[Sequence[str]] = None,
    include_scratch: bool = True,
    progress: bool = True,
) -> list[AblationRow]:
    """
    Train and probe one configuration per ablation row, all on the same data and
    seed, and write `ablation.csv`.

    Parameters
    ----------
    - `config` : TrainConfig
        Base config. Its own ablation flags are replaced by each row's.
    - `dataset` : Dataset
    - `probe_config` : ProbeConfig
    - `out_dir` : str
        Each row trains into `<out_dir>/<row>`.
    - `rows` : Optional[Sequence[str]]
        Names from `ABLATION_ROWS`. All rows by default.
    - `include_scratch` : bool
        Also probe the untrained full model, tagged `scratch`.
    """

    names = list(rows) if rows is not None else list(ABLATION_ROWS)
    unknown = [name for name in names if name not in ABLATION_ROWS]
    if unknown:
        raise ParameterError(f"Unknown ablation row(s) {unknown}. Valid rows: {', '.join(ABLATION_ROWS)}.")

    os.makedirs(out_dir, exist_ok=True)
    results: list[AblationRow] = []

    if include_scratch:
        scratch = init_state(config.with_ablations(()).model_config, config.base_momentum)
        results.append(AblationRow("scratch", (), linear_probe(scratch, dataset, probe_config)))

    for name in names:
        flags = ABLATION_ROWS[name]
        logger.info(f"Ablation row '{name}' (ablated: {list(flags) or 'none'}).")

        trainer = Trainer(config.with_ablations(flags), dataset, os.path.join(out_dir, name), progress=progress)
        state = trainer.run()
        results.append(AblationRow(name, flags, linear_probe(state, dataset, probe_config)))

    write_probe_csv(
        [(row.name, row.result) for row in results],
        os.path.join(out_dir, ABLATION_NAME),
        probe_config.num_classes,
    )
    return results
