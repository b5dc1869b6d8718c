"""
Timing records of the long operations of a run (dataset rendering, training,
probing, analyses, verification suites).
"""

import datetime as dt
import uuid

import peewee as pw
from database import BaseModel
from library.types import time_metric_types


class TimeMetric(BaseModel):

    """
    Wall-clock seconds spent in one operation.
    """

    id = pw.UUIDField(default=uuid.uuid4, primary_key=True)
    created_at = pw.DateTimeField(default=dt.datetime.now)
    type = pw.TextField(choices=time_metric_types)

    tt = pw.FloatField()
    title = pw.TextField(null=True)
    message = pw.TextField(null=True)
