from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from library.exceptions import ParameterError
from library.flow import FlowField, pixel_grid
from library.geometry import AffineAugment, affine_to_grid, invert_affine
from library.network import ModelState, dense_features, encode, predict, project_dense, project_pool
from library.tensor import (
    Tensor,
    add,
    avg_pool_all,
    bilinear_resize,
    grid_sample,
    l2_normalize,
    masked_mean,
    mean,
    scale,
    slice_batch,
    square,
    sub,
    sum_channels,
)
from library.types import NormMode

# Receives a projection and, on the dense path, the mask of pixels that reach the loss.
Predictor = Callable[[Tensor, Optional[np.ndarray]], Tensor]

# A warped validity mask counts as valid only when every bilinear corner was valid.
FULL_WEIGHT = 1 - 1e-6


@dataclass
class DenseStats:
    valid_pixels: int
    occluded_pixels: int
    total_pixels: int

    @property
    def valid_frac(self) -> float:
        return self.valid_pixels / self.total_pixels if self.total_pixels else 0.0

    @property
    def occ_frac(self) -> float:
        return self.occluded_pixels / self.total_pixels if self.total_pixels else 0.0


@dataclass
class LossReport:
    dense: float
    pooled: float
    total: float
    valid_frac: float
    occ_frac: float
    pairs: int
    flags: list[str] = field(default_factory=list)


@dataclass
class PreparedBatch:

    """
    One training batch after cropping and augmentation. Views are `(n, 3, H, W)`;
    flows and occlusion masks are expressed at `H x W` in global-crop
    coordinates. Subcrops are stacked over the whole batch.
    """

    view_t: np.ndarray
    view_t_plus: np.ndarray
    aug_t: list[AffineAugment]
    aug_t_plus: list[AffineAugment]
    flow_fwd: list[FlowField]
    flow_bwd: Optional[list[FlowField]]
    occ_fwd: list[np.ndarray]
    occ_bwd: Optional[list[np.ndarray]]
    sub_t: Optional[np.ndarray] = None
    sub_t_plus: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.view_t.shape[0]

    @property
    def pairs(self) -> int:
        return 0 if self.sub_t is None else self.sub_t.shape[0]

    def swapped(self) -> "PreparedBatch":
        """
        The same batch with the roles of the two frames exchanged.
        """

        if self.flow_bwd is None or self.occ_bwd is None:
            raise ParameterError("Swapping needs backward flow and occlusion.")

        return PreparedBatch(
            view_t=self.view_t_plus,
            view_t_plus=self.view_t,
            aug_t=self.aug_t_plus,
            aug_t_plus=self.aug_t,
            flow_fwd=self.flow_bwd,
            flow_bwd=self.flow_fwd,
            occ_fwd=self.occ_bwd,
            occ_bwd=self.occ_fwd,
            sub_t=self.sub_t_plus,
            sub_t_plus=self.sub_t,
        )


def _identity(projection: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    return projection


def masked_pixel_loss(online: Tensor, target: Tensor, mask: np.ndarray) -> Tensor:
    """
    Squared error summed over channels, averaged over pixels where `mask` holds.
    Masked-out pixels never reach the result, whatever their values.
    """

    return masked_mean(sum_channels(square(sub(online, target))), mask)


def _unaugment(projection: Tensor, augs: Sequence[AffineAugment], height: int, width: int) -> tuple[Tensor, np.ndarray]:
    grid = np.stack([affine_to_grid(invert_affine(aug), height, width) for aug in augs])
    return grid_sample(projection, grid.astype(projection.data.dtype))


def dense_loss(
    online: Tensor,
    offline: Tensor,
    aug_online: Sequence[AffineAugment],
    aug_offline: Sequence[AffineAugment],
    flows: Sequence[FlowField],
    occlusion: Sequence[np.ndarray],
    predictor: Optional[Predictor] = None,
) -> tuple[Tensor, DenseStats, np.ndarray]:
    """
    Flow-equivariance loss between online projections of frame t and offline
    projections of frame t+dt.

    Parameters
    ----------
    - `online`, `offline` : Tensor
        `(n, c, h, w)` dense projections of the augmented views.
    - `aug_online`, `aug_offline` : Sequence[AffineAugment]
        The spatial augmentation of every view, built at the input resolution.
    - `flows` : Sequence[FlowField]
        Flow from frame t to frame t+dt at the input resolution.
    - `occlusion` : Sequence[np.ndarray]
        Occluded pixels of frame t at the input resolution.
    - `predictor` : Optional[Predictor]
        Applied to the online path before normalization, together with the mask.
        Identity when omitted.

    Returns
    -------
    `tuple[Tensor, DenseStats, np.ndarray]` :
        The loss (a constant 0 when no pixel is valid), pixel counts and the
        `(n, 1, H, W)` boolean mask that was used.
    """

    predictor = predictor or _identity
    height, width = flows[0].height, flows[0].width
    n = online.shape[0]

    online_full = bilinear_resize(online, height, width)
    offline_full = bilinear_resize(offline, height, width)

    online_aligned, valid_online = _unaugment(online_full, aug_online, height, width)
    offline_aligned, valid_offline = _unaugment(offline_full, aug_offline, height, width)

    base = pixel_grid(height, width)
    grid = np.stack([base + flow.data for flow in flows]).astype(offline_aligned.data.dtype)
    offline_warped, valid_flow = grid_sample(offline_aligned, grid)
    valid_offline_warped, _ = grid_sample(Tensor(valid_offline), grid)
    target = l2_normalize(offline_warped)

    occluded = np.stack(occlusion)[:, None]
    mask = (
        (valid_online > 0)
        & (valid_offline_warped.data >= FULL_WEIGHT)
        & (valid_flow > 0)
        & ~occluded
    )

    stats = DenseStats(int(mask.sum()), int(occluded.sum()), n * height * width)
    if stats.valid_pixels == 0:
        return Tensor(np.zeros((), dtype=online.data.dtype)), stats, mask

    online_out = l2_normalize(predictor(online_aligned, mask))
    return masked_pixel_loss(online_out, target, mask), stats, mask


def pooled_loss(
    online: Tensor, offline: Tensor, predictor: Optional[Predictor] = None
) -> Tensor:
    """
    Subcrop prediction loss. Both inputs are `(k, c)` projections (maps are
    average-pooled first). Online vectors are normalized, passed through the
    predictor and normalized again; targets are normalized. The result is the
    squared error averaged over pairs, or a constant 0 when `k = 0`.
    """

    if online.shape[0] == 0:
        return Tensor(np.zeros((), dtype=online.data.dtype))

    predictor = predictor or _identity
    if online.ndim == 4:
        online = avg_pool_all(online)
    if offline.ndim == 4:
        offline = avg_pool_all(offline)

    prediction = l2_normalize(predictor(l2_normalize(online), None))
    target = l2_normalize(offline)
    error = square(sub(prediction, target))

    return scale(mean(error), float(error.shape[1]))


def symmetrized_total(
    state: ModelState,
    batch: PreparedBatch,
    use_dense: bool = True,
    use_pool: bool = True,
    symmetric: bool = True,
    online_mode: NormMode = "train",
    predictor: Optional[Predictor] = None,
) -> tuple[Tensor, LossReport]:
    """
    Full objective of one batch. The online branch runs once on both views
    stacked as `(t, t+dt)` and the offline branch on `(t+dt, t)`, so each half
    predicts the other frame. The two directions are averaged and the dense and
    pooled terms are added with equal weight.

    Without backward flow the loss is computed from frame t to frame t+dt only
    and the report carries the `one-directional` flag.

    Parameters
    ----------
    - `state` : ModelState
    - `batch` : PreparedBatch
    - `use_dense`, `use_pool` : bool
        Ablation switches for the two terms.
    - `symmetric` : bool
    - `online_mode` : NormMode
        Normalization mode of the online branch. `eval` makes tied weights
        compute the same function on both branches.
    - `predictor` : Optional[Predictor]
        Replaces the online predictor heads, for instance with the identity.
    """

    flags: list[str] = []
    two_way = symmetric and batch.flow_bwd is not None and batch.occ_bwd is not None
    if symmetric and not two_way:
        flags.append("one-directional")

    online = state.online_weights(online_mode)
    offline = state.offline_weights()
    n = batch.size

    def online_predictor(projection: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        if predictor is not None:
            return predictor(projection, mask)

        return predict(online, projection, mask)

    terms: list[Tensor] = []
    dense_value = pooled_value = 0.0
    valid_frac = occ_frac = 0.0

    if use_dense:
        views_online = np.concatenate([batch.view_t, batch.view_t_plus]) if two_way else batch.view_t
        views_offline = np.concatenate([batch.view_t_plus, batch.view_t]) if two_way else batch.view_t_plus

        features_online, _ = dense_features(state.config, online, Tensor(views_online))
        features_offline, _ = dense_features(state.config, offline, Tensor(views_offline))
        projection_online = project_dense(online, features_online)
        projection_offline = project_dense(offline, features_offline)

        directions = [
            (batch.aug_t, batch.aug_t_plus, batch.flow_fwd, batch.occ_fwd),
        ]
        if two_way:
            directions.append((batch.aug_t_plus, batch.aug_t, batch.flow_bwd, batch.occ_bwd))

        losses, valid, occluded, total = [], 0, 0, 0
        for index, (aug_online, aug_offline, flows, occlusion) in enumerate(directions):
            loss, stats, _ = dense_loss(
                slice_batch(projection_online, index * n, (index + 1) * n),
                slice_batch(projection_offline, index * n, (index + 1) * n),
                aug_online,
                aug_offline,
                flows,
                occlusion,
                predictor=online_predictor,
            )
            if stats.valid_pixels == 0:
                flags.append("no-valid-pixels")

            losses.append(loss)
            valid += stats.valid_pixels
            occluded += stats.occluded_pixels
            total += stats.total_pixels

        dense = losses[0] if len(losses) == 1 else scale(add(losses[0], losses[1]), 0.5)
        terms.append(dense)
        dense_value = dense.item()
        valid_frac = valid / total
        occ_frac = occluded / total

    pairs = batch.pairs
    if use_pool:
        if pairs == 0:
            flags.append("no-subcrop-pairs")
        else:
            subs_online = np.concatenate([batch.sub_t, batch.sub_t_plus]) if two_way else batch.sub_t
            subs_offline = np.concatenate([batch.sub_t_plus, batch.sub_t]) if two_way else batch.sub_t_plus

            top_online = encode(state.config, online, Tensor(subs_online))[-1]
            top_offline = encode(state.config, offline, Tensor(subs_offline))[-1]

            pooled = pooled_loss(
                project_pool(online, top_online),
                project_pool(offline, top_offline),
                predictor=online_predictor,
            )
            terms.append(pooled)
            pooled_value = pooled.item()

    if not terms:
        total_tensor = Tensor(np.zeros((), dtype=np.float32))
    elif len(terms) == 1:
        total_tensor = terms[0]
    else:
        total_tensor = add(terms[0], terms[1])

    report = LossReport(
        dense=dense_value,
        pooled=pooled_value,
        total=total_tensor.item(),
        valid_frac=valid_frac,
        occ_frac=occ_frac,
        pairs=pairs if use_pool else 0,
        flags=flags,
    )
    return total_tensor, report
