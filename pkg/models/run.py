import datetime as dt
import uuid

import peewee as pw
from database import BaseModel, JSONField


class Run(BaseModel):
    """
    The registry copy of a `run_manifest.json`: everything needed to repeat a
    command exactly.
    """

    id = pw.UUIDField(primary_key=True, default=uuid.uuid4)
    created_at = pw.DateTimeField(default=dt.datetime.now)

    command = pw.TextField()
    seed = pw.IntegerField()
    build = pw.TextField()
    config = JSONField()
    layout = JSONField()

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "build": self.build,
            "config": self.config,
            "layout": self.layout,
        }
