import importlib.util
import os
import sys
import time
import traceback
from typing import Optional

from loguru import logger

from library import utils
from library.exceptions import ParameterError
from library.types import suite_names


class SuiteManager:

    """
    Loads verification suites from the `suites` directory and runs them.
    """

    def __init__(self, suites_directory: str) -> None:
        self.suites_directory = suites_directory

    def load_suite(self, name: str):
        """
        Load `suites/<name>.py` and return the suite its `setup()` builds.

        Raises
        ------
        `ParameterError` :
            The name is not a known suite.
        """

        if name not in suite_names:
            raise ParameterError(f"Unknown suite '{name}'. Valid suites: {', '.join(suite_names)}, all.")

        logger.debug(f"Loading suite '{name}'.")

        # Suite modules import the package's base classes.
        parent = os.path.dirname(self.suites_directory)
        if parent not in sys.path:
            sys.path.insert(0, parent)

        path = os.path.join(self.suites_directory, f"{name}.py")
        spec = importlib.util.spec_from_file_location(f"suites.{name}", path)
        if spec is None:
            raise ParameterError(f"Suite file '{path}' cannot be loaded.")

        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)  # type: ignore

        return module.setup()

    def run(self, names: Optional[list[str]] = None) -> list:
        """
        Run the named suites, or every enabled suite.

        Returns
        -------
        `list[SuiteReport]` :
            One report per suite that ran.
        """

        from suites import CheckResult, SuiteReport

        reports = []
        for name in names or suite_names:
            suite = self.load_suite(name)
            if not suite.config.enabled and names is None:
                logger.info(f"Suite '{name}' is disabled.")
                continue

            logger.info(f"Running suite '{name}' ({suite.title})...")
            st = time.perf_counter()

            try:
                checks = suite.run()
            except Exception as e:
                logger.exception(f"Suite '{name}' raised.")
                checks = [CheckResult("suite-raised", False, 1.0, 0.0, f"{type(e).__name__}: {e}")]
                utils.log_error(
                    "suite-failed",
                    f"Suite '{name}' raised",
                    message=str(e),
                    traceback=traceback.format_exc(),
                )

            tt = round(time.perf_counter() - st, 2)
            report = SuiteReport(name, checks, tt)
            reports.append(report)

            utils.log_time_metric("verify", tt, title=name, message="passed" if report.passed else "failed")
            if report.passed:
                logger.info(f"Suite '{name}': {len(checks)} check(s) passed in {tt} seconds.")
            else:
                failures = ", ".join(check.name for check in report.failures)
                utils.log_error(
                    "suite-failed",
                    f"Suite '{name}' failed",
                    message=failures,
                    metadata={"failures": [check.__dict__ for check in report.failures]},
                )

        return reports


suite_manager = SuiteManager(os.path.join(os.getcwd(), "suites"))
