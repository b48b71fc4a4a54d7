import functools

import click

from pksim.errors import PksimError
from pksim.logger import setup_logger

logger = setup_logger()

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_ERROR = 2


def command_boundary(func):
    """
    Runs a command body that returns an exit code. Library errors become exit code 2
    with a one-line message; anything unexpected is logged with its traceback.
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            code = func(*args, **kwargs)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except PksimError as e:
            logger.error(f"{func.__name__}: {type(e).__name__}: {e}")
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            code = EXIT_ERROR
        except Exception as e:
            logger.error(f"{func.__name__}: unexpected failure: {e}", exc_info=True)
            click.echo(f"error: unexpected failure: {e}", err=True)
            code = EXIT_ERROR
        raise click.exceptions.Exit(code or EXIT_OK)
    return wrapper
