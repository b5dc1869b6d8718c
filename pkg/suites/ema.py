import numpy as np

from library.network import ModelConfig, ModelState, ema_update, init_state, momentum_at
from library.trainer import AdamW

from suites import BaseSuite, CheckResult


def _tiny_state(seed: int, base_momentum: float = 0.996) -> ModelState:
    return init_state(
        ModelConfig(widths=(8, 16, 16, 16), proj_hidden=8, proj_dim=8, init_seed=seed), base_momentum
    )


def _snapshot(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: value.copy() for name, value in arrays.items()}


def _identical(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[name], b[name]) for name in a)


class EmaSuite(BaseSuite):
    def __init__(self) -> None:
        super().__init__(
            id="ema",
            title="Moving-average target",
            description="Exact-arithmetic properties of the offline branch update.",
        )

    def run(self) -> list[CheckResult]:
        total = self.config.options.get("total_steps", 8)
        checks = []

        for seed in self.config.seeds:
            rng = np.random.default_rng(seed)

            checks.append(
                self.expect(
                    f"momentum-endpoints[seed={seed}]",
                    momentum_at(0, total, 0.996) == 0.996 and momentum_at(total, total, 0.996) == 1.0,
                )
            )

            state = _tiny_state(seed)
            for step in range(total):
                ema_update(state, step, total)
            tied = all(np.array_equal(state.offline[name], state.online[name].data) for name in state.offline)
            checks.append(self.expect(f"tied-stays-tied[seed={seed}]", tied))

            for tensor in state.online.values():
                tensor.data = tensor.data + rng.normal(size=tensor.shape).astype(np.float32)
            before = _snapshot(state.offline)
            ema_update(state, total, total)
            checks.append(self.expect(f"unit-momentum-freezes[seed={seed}]", _identical(before, state.offline)))

            state = _tiny_state(seed, base_momentum=0.5)
            name = next(iter(state.offline))
            state.offline[name][...] = 0.0
            state.online[name].data[...] = 1.0
            ema_update(state, 0, total)
            checks.append(self.expect(f"dyadic-step[seed={seed}]", bool(np.all(state.offline[name] == 0.5))))

            for buffer in state.online_buffers.values():
                buffer += rng.normal(size=buffer.shape).astype(np.float32)
            ema_update(state, 1, total)
            checks.append(
                self.expect(f"buffers-copied[seed={seed}]", _identical(state.online_buffers, state.offline_buffers))
            )

            checks.append(
                self.expect(
                    f"predictors-online-only[seed={seed}]",
                    not any(name.startswith("predictor.") for name in state.offline)
                    and any(name.startswith("predictor.") for name in state.online),
                )
            )

            offline, buffers = _snapshot(state.offline), _snapshot(state.offline_buffers)
            for tensor in state.online.values():
                tensor.grad = rng.normal(size=tensor.shape).astype(np.float32)
            AdamW(state.online).step(1e-3)
            checks.append(
                self.expect(
                    f"optimizer-leaves-offline[seed={seed}]",
                    _identical(offline, state.offline) and _identical(buffers, state.offline_buffers),
                )
            )

        return checks


def setup():
    return EmaSuite()
