import re

from marshmallow import Schema, ValidationError, fields, post_load, validate, validates_schema

from library.analysis import EmpiricalConfig, ToyConfig
from library.geometry import AffineConfig, PhotometricConfig
from library.network import ModelConfig
from library.synth import SynthConfig
from library.trainer import ProbeConfig, TrainConfig
from library.types import ablation_flags

SEPARATORS = re.compile(r"[,:x]")


class Series(fields.Field):
    """
    A tuple of `inner` values, written as a list or as a `,`-separated string.
    """

    def __init__(self, inner: fields.Field, length: int = 0, **kwargs) -> None:
        super().__init__(**kwargs)
        self.inner = inner
        self.length = length

    def _split(self, value) -> list:
        if isinstance(value, str):
            return [part.strip() for part in SEPARATORS.split(value) if part.strip()]
        if isinstance(value, (list, tuple)):
            return list(value)

        raise ValidationError("Expected a list or a comma-separated string.")

    def _deserialize(self, value, attr, data, **kwargs) -> tuple:
        parts = self._split(value)
        if self.length and len(parts) != self.length:
            raise ValidationError(f"Expected {self.length} values, got {len(parts)}.")

        return tuple(self.inner.deserialize(part) for part in parts)

    def _serialize(self, value, attr, obj, **kwargs):
        return None if value is None else list(value)


class Pair(Series):
    """
    A `lo,hi` (or `lo:hi`) range with `lo <= hi`.
    """

    def __init__(self, inner: fields.Field, ordered: bool = True, **kwargs) -> None:
        super().__init__(inner, length=2, **kwargs)
        self.ordered = ordered

    def _deserialize(self, value, attr, data, **kwargs) -> tuple:
        lo, hi = super()._deserialize(value, attr, data, **kwargs)
        if self.ordered and lo > hi:
            raise ValidationError(f"Range start {lo} exceeds its end {hi}.")

        return lo, hi


def _fraction_range(value: tuple) -> bool:
    return 0 < value[0] <= value[1] <= 1


class AffineConfigSchema(Schema):
    scale_range = Pair(fields.Float(validate=validate.Range(min=0, min_inclusive=False)))
    rotation_range = Pair(fields.Float())

    @post_load
    def make(self, data: dict, **kwargs) -> AffineConfig:
        return AffineConfig(**data)


class PhotometricConfigSchema(Schema):
    brightness_range = Pair(fields.Float())
    contrast_range = Pair(fields.Float(validate=validate.Range(min=0)))
    blur_sigma_range = Pair(fields.Float(validate=validate.Range(min=0)))
    blur_probability = fields.Float(validate=validate.Range(min=0, max=1))

    @post_load
    def make(self, data: dict, **kwargs) -> PhotometricConfig:
        return PhotometricConfig(**data)


class ModelConfigSchema(Schema):
    widths = Series(fields.Int(validate=validate.Range(min=1)))
    blocks_per_stage = fields.Int(validate=validate.Range(min=1))
    sdm_blocks = fields.Int(validate=validate.Range(min=1))
    bottleneck_ratio = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False))
    lateral_layers = fields.Int(validate=validate.OneOf([1, 2]))
    proj_hidden = fields.Int(validate=validate.Range(min=1))
    proj_dim = fields.Int(validate=validate.Range(min=1))
    # Derived from the ablation flags and the seed; accepted so run manifests load back.
    topdown = fields.Bool()
    lateral = fields.Bool()
    init_seed = fields.Int()

    @post_load
    def make(self, data: dict, **kwargs) -> ModelConfig:
        return ModelConfig(**data)


class TrainConfigSchema(Schema):
    seed = fields.Int(validate=validate.Range(min=0))
    batch_size = fields.Int(validate=validate.Range(min=1))
    epochs = fields.Int(validate=validate.Range(min=1))
    max_steps = fields.Int(validate=validate.Range(min=0))
    base_lr = fields.Float(validate=validate.Range(min=0))
    weight_decay = fields.Float(validate=validate.Range(min=0))
    warmup_epochs = fields.Float(validate=validate.Range(min=0))
    betas = Pair(fields.Float(validate=validate.Range(min=0, max=1, max_inclusive=False)), ordered=False)
    adam_eps = fields.Float(validate=validate.Range(min=0, min_inclusive=False))
    base_momentum = fields.Float(validate=validate.Range(min=0, max=1))
    dt_range = Pair(fields.Int(validate=validate.Range(min=0)))
    global_area_range = Pair(fields.Float(), validate=_fraction_range)
    global_area_mode = fields.Str(validate=validate.OneOf(["uniform", "truncnorm"]))
    global_area_sigma = fields.Float(validate=validate.Range(min=0, min_inclusive=False))
    global_size = Pair(fields.Int(validate=validate.Range(min=1)), ordered=False)
    num_subcrops = fields.Int(validate=validate.Range(min=0))
    subcrop_area_range = Pair(fields.Float(), validate=_fraction_range)
    subcrop_aspect_range = Pair(fields.Float(validate=validate.Range(min=0, min_inclusive=False)))
    subcrop_size = fields.Int(validate=validate.Range(min=1))
    subcrop_jitter = fields.Float(validate=validate.Range(min=0, max=1))
    subcrop_attempts = fields.Int(validate=validate.Range(min=1))
    static_crop_jitter = fields.Float(validate=validate.Range(min=0, max=1))
    repeat_samples = fields.Int(validate=validate.Range(min=1))
    alpha1 = fields.Float(validate=validate.Range(min=0))
    alpha2 = fields.Float(validate=validate.Range(min=0))
    affine = fields.Nested(AffineConfigSchema)
    photometric = fields.Nested(PhotometricConfigSchema)
    ablate = Series(fields.Str(validate=validate.OneOf(ablation_flags)), load_default=())
    model = fields.Nested(ModelConfigSchema)
    checkpoint_every = fields.Int(validate=validate.Range(min=0))
    prefetch_depth = fields.Int(validate=validate.Range(min=1))

    @validates_schema
    def validate_ablations(self, data: dict, **kwargs) -> None:
        flags = set(data.get("ablate", ()))
        if {"dense", "pool"} <= flags:
            raise ValidationError("Ablating both dense and pool leaves nothing to train.", "ablate")

    @post_load
    def make(self, data: dict, **kwargs) -> TrainConfig:
        data["ablate"] = tuple(dict.fromkeys(data.get("ablate", ())))
        return TrainConfig(**data)


class SynthConfigSchema(Schema):
    scenes = fields.Int(validate=validate.Range(min=1))
    height = fields.Int(validate=validate.Range(min=8))
    width = fields.Int(validate=validate.Range(min=8))
    shapes_range = Pair(fields.Int(validate=validate.Range(min=0)))
    speed_max = fields.Int(validate=validate.Range(min=0))
    dt_range = Pair(fields.Int(validate=validate.Range(min=0)))
    seed = fields.Int(validate=validate.Range(min=0))

    @post_load
    def make(self, data: dict, **kwargs) -> SynthConfig:
        return SynthConfig(**data)


class ProbeConfigSchema(Schema):
    epochs = fields.Int(validate=validate.Range(min=1))
    lr = fields.Float(validate=validate.Range(min=0, min_inclusive=False))
    batch_size = fields.Int(validate=validate.Range(min=1))
    height = fields.Int(validate=validate.Range(min=1))
    width = fields.Int(validate=validate.Range(min=1))
    eval_fraction = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False))
    num_classes = fields.Int(validate=validate.Range(min=2))
    seed = fields.Int(validate=validate.Range(min=0))
    feature_batch = fields.Int(validate=validate.Range(min=1))

    @post_load
    def make(self, data: dict, **kwargs) -> ProbeConfig:
        return ProbeConfig(**data)


class ToyConfigSchema(Schema):
    height = fields.Int(validate=validate.Range(min=1))
    width = fields.Int(validate=validate.Range(min=1))
    radii = Series(fields.Float(validate=validate.Range(min=0, min_inclusive=False)))
    areas = Series(fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False)))
    threshold = fields.Float(validate=validate.Range(min=0, max=1))

    @post_load
    def make(self, data: dict, **kwargs) -> ToyConfig:
        return ToyConfig(**data)


class EmpiricalConfigSchema(Schema):
    global_area_range = Pair(fields.Float(), validate=_fraction_range)
    global_crops = fields.Int(validate=validate.Range(min=1))
    subcrop_area_range = Pair(fields.Float(), validate=_fraction_range)
    aspect_range = Pair(fields.Float(validate=validate.Range(min=0, min_inclusive=False)))
    n_subcrops = fields.Int(validate=validate.Range(min=1))
    n_bins = fields.Int(validate=validate.Range(min=1))
    threshold = fields.Float(validate=validate.Range(min=0, max=1))
    fg_threshold = fields.Float(validate=validate.Range(min=0, max=1))
    foreground_classes = Series(fields.Int(validate=validate.Range(min=0)))
    background_classes = Series(fields.Int(validate=validate.Range(min=0)))
    num_classes = fields.Int(validate=validate.Range(min=1))
    seed = fields.Int(validate=validate.Range(min=0))

    @post_load
    def make(self, data: dict, **kwargs) -> EmpiricalConfig:
        return EmpiricalConfig(**data)
