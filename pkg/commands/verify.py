import click

from library.cli_utils import fail, handle_errors
from library.suites import suite_manager
from library.types import suite_names


@click.command("verify")
@click.option(
    "--suite",
    "suite",
    type=click.Choice(suite_names + ["all"]),
    default="all",
    show_default=True,
    help="Verification suite to run.",
)
@handle_errors
def verify(suite):
    """
    Run gradient, warping and moving-average checks.
    """

    reports = suite_manager.run(None if suite == "all" else [suite])

    for report in reports:
        click.echo(f"[{report.suite}] {'PASS' if report.passed else 'FAIL'} ({report.tt}s)")
        for check in report.checks:
            status = "ok" if check.passed else "FAIL"
            line = f"  {status:<4} {check.name}: {check.value:.3g} (tolerance {check.tolerance:.3g})"
            if check.detail:
                line = f"{line} {check.detail}"
            click.echo(line)

    failed = [report.suite for report in reports if not report.passed]
    if failed:
        fail("V03", f"Failing suite(s): {', '.join(failed)}.")


def setup():
    return verify
