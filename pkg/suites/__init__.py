import dataclasses
import json
import os
from abc import ABC, abstractmethod
from typing import Optional

from library.types import SuiteName


@dataclasses.dataclass
class SuiteConfig:

    """
    Contains configuration about a specific verification suite.
    """

    seeds: list[int] = dataclasses.field(default_factory=lambda: [0, 1, 2])
    tolerance: float = 1e-3
    enabled: bool = True
    options: dict = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


@dataclasses.dataclass
class SuiteReport:
    suite: str
    checks: list[CheckResult]
    tt: float = 0.0

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> list[CheckResult]:
        return [check for check in self.checks if not check.passed]


class SuiteABC(ABC):
    @abstractmethod
    def run(self) -> list[CheckResult]:
        """
        Run every check of the suite.
        """


class BaseSuite(SuiteABC):

    """
    The base suite that every verification suite must derive from.

    Attributes
    ----------------
    - `id` : SuiteName
        The ID of the suite. This should be the suite's file name without the .py
        extension.
    - `title` : str
        The title of the suite. Used in reports.
    - `description` : str
    """

    def __init__(self, id: SuiteName, title: Optional[str] = None, description: Optional[str] = None) -> None:
        self.id = id
        self.title = title
        self.description = description

        self.config = self.get_config()

    def get_config(self) -> SuiteConfig:
        """
        Return the config file for this suite.
        """

        with open(os.path.join(os.getcwd(), "suites", f"{self.id}.json"), encoding="utf-8") as f:
            return SuiteConfig(**json.load(f))

    def check(self, name: str, value: float, tolerance: Optional[float] = None, detail: str = "") -> CheckResult:
        """
        A check that passes when `value <= tolerance`.
        """

        tolerance = self.config.tolerance if tolerance is None else tolerance
        return CheckResult(name, bool(value <= tolerance), float(value), tolerance, detail)

    def expect(self, name: str, condition: bool, detail: str = "") -> CheckResult:
        return CheckResult(name, bool(condition), 0.0 if condition else 1.0, 0.0, detail)
