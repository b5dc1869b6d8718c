from typing import Literal, cast, get_args

AblationFlag = Literal["dense", "pool", "topdown", "lateral"]
SuiteName = Literal["grad", "warp", "ema", "align"]
ShapeKind = Literal["circle", "rectangle"]
NormMode = Literal["train", "eval"]
AreaMode = Literal["uniform", "truncnorm"]
ErrorCodeType = Literal["C01", "C02", "C03", "C04", "D01", "D02", "V01", "V02", "V03", "X01"]
ErrorLogType = Literal[
    "non-finite-loss",
    "checkpoint-digest-mismatch",
    "subcrop-rejected",
    "suite-failed",
    "invalid-output-path",
]
TimeMetricType = Literal[
    "gen-data",
    "train",
    "probe",
    "analysis",
    "verify",
]

ablation_flags = [cast(str, value) for value in get_args(AblationFlag)]
suite_names = [cast(str, value) for value in get_args(SuiteName)]
error_log_types = [
    (cast(str, value), cast(str, value)) for value in get_args(ErrorLogType)
]
time_metric_types = [
    (cast(str, value), cast(str, value)) for value in get_args(TimeMetricType)
]
