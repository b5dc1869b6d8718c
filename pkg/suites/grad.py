import dataclasses
import time
from typing import Callable

import numpy as np
from loguru import logger

from library.cropping import SubcropSampler
from library.losses import PreparedBatch, symmetrized_total
from library.network import ModelConfig, ModelState, init_state
from library.synth import SynthConfig, SyntheticDataset
from library.tensor import (
    Tensor,
    add,
    avg_pool_all,
    batch_norm,
    bilinear_resize,
    concat,
    conv2d,
    cross_entropy,
    grid_sample,
    gradcheck,
    l2_normalize,
    linear,
    masked_mean,
    mean,
    relu,
    reshape,
    scale,
    slice_batch,
    square,
    sub,
    sum_channels,
)
from library.trainer import TrainConfig, prepare_batch, step_rng

from suites import BaseSuite, CheckResult

# Parameters of the full-graph check. Only affine maps and the normalization
# sit between them and the loss, so finite differences never cross a ReLU kink.
FULL_GRAPH_PARAMETERS = (
    "predictor.dense.fc2.weight",
    "predictor.dense.fc2.bias",
    "predictor.pool.fc2.weight",
    "predictor.pool.fc2.bias",
)


def _reduce(output: Tensor) -> Tensor:
    """
    A smooth scalar of `output`: squared distance to a fixed random target.
    """

    target = np.random.default_rng(1234).normal(size=output.shape).astype(output.data.dtype)
    return mean(square(sub(output, Tensor(target))))


def _away_from_zero(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    values = rng.normal(size=shape)
    return np.sign(values) * (0.1 + np.abs(values))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    """
    One scalar-valued function and its inputs per differentiable op.
    """

    normal = lambda *shape: Tensor(rng.normal(size=shape))
    grid = rng.uniform(-0.5, 5.5, size=(2, 4, 3, 2))
    mask = rng.random((2, 1, 3, 4)) > 0.3
    mask[0, 0, 0, 0] = True
    labels = rng.integers(0, 4, size=(2, 3, 3))

    def norm(x, gamma, beta):
        running_mean, running_var = np.zeros(3), np.ones(3)
        return _reduce(batch_norm(x, gamma, beta, running_mean, running_var, mode="train"))

    def structural(a, b):
        stacked = concat([a, scale(add(a, b), 0.5)])
        return _reduce(reshape(slice_batch(stacked, 1, 3), (2, -1)))

    return {
        "conv2d": (lambda x, w, b: _reduce(conv2d(x, w, b, stride=2, pad=1)), [normal(2, 3, 6, 6), normal(4, 3, 3, 3), normal(4)]),
        "conv2d-dilated": (
            lambda x, w, b: _reduce(conv2d(x, w, b, pad=2, dilation=2)),
            [normal(1, 2, 7, 7), normal(3, 2, 3, 3), normal(3)],
        ),
        "conv2d-1x1": (lambda x, w, b: _reduce(conv2d(x, w, b)), [normal(2, 4, 3, 3), normal(2, 4, 1, 1), normal(2)]),
        "linear": (lambda x, w, b: _reduce(linear(x, w, b)), [normal(4, 5), normal(3, 5), normal(3)]),
        "grid_sample": (lambda x: _reduce(grid_sample(x, grid)[0]), [normal(2, 2, 5, 6)]),
        "bilinear_resize": (lambda x: _reduce(bilinear_resize(x, 7, 9)), [normal(2, 3, 4, 5)]),
        "avg_pool_all": (lambda x: _reduce(avg_pool_all(x)), [normal(2, 3, 4, 4)]),
        "l2_normalize": (lambda x: _reduce(l2_normalize(x)), [normal(2, 3, 4, 4)]),
        "batch_norm": (norm, [normal(4, 3, 2, 2), normal(3), normal(3)]),
        "relu": (lambda x: _reduce(relu(x)), [Tensor(_away_from_zero(rng, (2, 3, 4)))]),
        "cross_entropy": (lambda x: cross_entropy(x, labels), [normal(2, 4, 3, 3)]),
        "masked_squared_error": (
            lambda a, b: masked_mean(sum_channels(square(sub(a, b))), mask),
            [normal(2, 3, 3, 4), normal(2, 3, 3, 4)],
        ),
        "structural": (structural, [normal(2, 3, 2, 2), normal(2, 3, 2, 2)]),
    }


def _promote(state: ModelState) -> ModelState:
    return dataclasses.replace(
        state,
        online={name: Tensor(tensor.data.astype(np.float64), requires_grad=True, name=name) for name, tensor in state.online.items()},
        offline={name: value.astype(np.float64) for name, value in state.offline.items()},
        online_buffers={name: value.astype(np.float64) for name, value in state.online_buffers.items()},
        offline_buffers={name: value.astype(np.float64) for name, value in state.offline_buffers.items()},
    )


def full_graph_case(seed: int) -> tuple[ModelState, PreparedBatch]:
    """
    A tiny model and a two-sample batch with both loss terms active.
    """

    model = ModelConfig(widths=(8, 16, 16, 16), proj_hidden=8, proj_dim=8)
    config = TrainConfig(
        seed=seed, batch_size=2, global_size=(32, 32), subcrop_size=16, num_subcrops=2, model=model
    )
    dataset = SyntheticDataset.from_config(SynthConfig(scenes=2, height=48, width=96, seed=seed))
    sampler = SubcropSampler(2, area_range=config.subcrop_area_range, jitter=config.subcrop_jitter)

    batch = prepare_batch([dataset[0], dataset[1]], config, step_rng(seed, 0), sampler)
    batch = dataclasses.replace(
        batch,
        view_t=batch.view_t.astype(np.float64),
        view_t_plus=batch.view_t_plus.astype(np.float64),
        sub_t=batch.sub_t.astype(np.float64),
        sub_t_plus=batch.sub_t_plus.astype(np.float64),
    )

    return _promote(init_state(config.model_config)), batch


class GradSuite(BaseSuite):
    def __init__(self) -> None:
        super().__init__(
            id="grad",
            title="Gradient checks",
            description="Central finite differences against tape adjoints, per op and for the full loss.",
        )

    def full_graph(self, seed: int) -> float:
        state, batch = full_graph_case(seed)
        names = [name for name in FULL_GRAPH_PARAMETERS if name in state.online]

        def loss(*params: Tensor) -> Tensor:
            online = dict(state.online)
            online.update(zip(names, params))
            total, _ = symmetrized_total(dataclasses.replace(state, online=online), batch)
            return total

        return gradcheck(
            loss,
            [state.online[name] for name in names],
            eps=self.config.options.get("full_graph_eps", 1e-4),
            max_entries=self.config.options.get("max_entries", 6),
            seed=seed,
        )

    def run(self) -> list[CheckResult]:
        checks = []
        for seed in self.config.seeds:
            st = time.perf_counter()
            for name, (function, inputs) in op_cases(np.random.default_rng(seed)).items():
                error = gradcheck(function, inputs, eps=self.config.options.get("eps", 1e-3))
                checks.append(self.check(f"{name}[seed={seed}]", error))

            error = self.full_graph(seed)
            checks.append(
                self.check(
                    f"symmetrized-loss[seed={seed}]",
                    error,
                    tolerance=self.config.options.get("full_graph_tolerance", 5e-3),
                )
            )
            logger.debug(f"Gradient checks for seed {seed} took {round(time.perf_counter() - st, 2)}s.")

        return checks


def setup():
    return GradSuite()
