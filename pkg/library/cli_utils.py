import copy
import functools
import os
import sys
import traceback
from typing import NoReturn, Optional

import click
from configura import config
from loguru import logger
from marshmallow import Schema, ValidationError

import database
from library import utils
from library.exceptions import PoodleError
from library.types import ErrorCodeType


def fail(error_code: ErrorCodeType, detail: Optional[str] = None) -> NoReturn:
    """
    Print the title and message of `error_code` from `config/error_codes.json`
    and exit with its exit code.

    Parameters
    ----------
    - `error_code` : ErrorCodeType
    - `detail` : Optional[str]
        Appended after the message, for instance the offending fields.
    """

    entry = config.error_codes[error_code]
    message = f"Error {error_code}: {entry['title']}. {entry['message']}."
    if detail:
        message = f"{message} {detail}"

    click.echo(message, err=True)
    database.close_registry()
    sys.exit(entry["exit_code"])


def handle_errors(func):
    """
    A command decorator that turns library exceptions into exit codes.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ValidationError as e:
            fail("C01", str(e.messages))
        except FileNotFoundError as e:
            fail("C04", str(e))
        except PoodleError as e:
            logger.debug(traceback.format_exc())
            fail(e.error_code, str(e))
        finally:
            database.close_registry()

    return wrapper


def merge(base: dict, override: dict) -> dict:
    """
    Recursive dictionary merge. Values of `override` win.
    """

    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value

    return merged


def read_config_file(path: str, section: str) -> dict:
    """
    Read a user config file.

    A `.json` file is a `run_manifest.json`; its `config[section]` is used.
    Any other file holds `key=value` lines, `#` starts a comment and dotted keys
    such as `model.widths=16,32,64,128` address nested sections.
    """

    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file '{path}' does not exist.")

    if path.endswith(".json"):
        manifest = utils.read_run_manifest(path)
        return manifest.get("config", {}).get(section, {})

    values: dict = {}
    with open(path, "r", encoding="utf-8") as file:
        for number, raw in enumerate(file, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError({path: [f"Line {number} is not a key=value pair: '{line}'"]})

            key, value = (part.strip() for part in line.split("=", 1))
            *parents, leaf = key.split(".")
            target = values
            for parent in parents:
                target = target.setdefault(parent, {})
            target[leaf] = value

    return values


def resolve_config(schema: Schema, defaults: dict, path: Optional[str], overrides: dict, section: str):
    """
    Merge the JSON defaults, the config file and the command-line flags, in that
    order, and load the result through `schema`. Flags left at None are ignored.
    """

    resolved = copy.deepcopy(dict(defaults))
    if path:
        resolved = merge(resolved, read_config_file(path, section))

    flags = {key: value for key, value in overrides.items() if value is not None}
    resolved = merge(resolved, flags)

    return schema.load(resolved)


def prepare_output(out_dir: str) -> str:
    """
    Create `out_dir`, check that it is writable and open the run registry in it.
    """

    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-test")
        with open(probe, "w", encoding="utf-8") as file:
            file.write("")
        os.remove(probe)
    except OSError as e:
        utils.log_error("invalid-output-path", "Output path is not writable", message=f"{out_dir}: {e}")
        fail("C03", f"'{out_dir}': {e.strerror or e}")

    database.open_registry(out_dir)
    return out_dir
