import json
import os

from peewee import Model, SqliteDatabase, TextField

# Opened per run once the command knows its output directory.
db = SqliteDatabase(None)

REGISTRY_NAME = "registry.db"


class BaseModel(Model):
    class Meta:
        database = db


class JSONField(TextField):
    def db_value(self, value):
        return json.dumps(value, sort_keys=True)

    def python_value(self, value):
        if value is not None:
            return json.loads(value)


def is_ready() -> bool:
    return db.database is not None and not db.is_closed()


def open_registry(out_dir: str) -> str:
    """
    Bind the registry to `<out_dir>/registry.db` and create its tables.
    """

    from models.error import Error
    from models.metric import TimeMetric
    from models.run import Run

    path = os.path.join(out_dir, REGISTRY_NAME)
    if is_ready():
        db.close()

    db.init(path, pragmas={"journal_mode": "wal"})
    db.connect(reuse_if_open=True)
    db.create_tables([Run, Error, TimeMetric])

    return path


def close_registry() -> None:
    if is_ready():
        db.close()
