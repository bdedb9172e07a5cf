#!/usr/bin/env python3
"""
RFB-SR Toolkit
Main entry point for the super-resolution command line
"""

import json
import logging
import logging.handlers
import sys
from pathlib import Path
from typing import Optional, Sequence

from core.cli import apply_overrides, dispatch, parse_args
from core.config import Config
from core.errors import SRError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: str = "INFO", log_file: Optional[str] = None,
                  max_size: int = 10485760, backup_count: int = 5) -> None:
    """Setup logging configuration

    Logs go to stderr; stdout is reserved for command output such as the
    eval CSV. A rotating log file is added when ``logging.file`` is set.
    """
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.handlers.RotatingFileHandler(
            path, maxBytes=max_size, backupCount=backup_count, encoding='utf-8'))

    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )


def report_failure(error: BaseException, code: int) -> None:
    """Single machine-readable failure line on stderr"""
    sys.stderr.write(f"error code={code} kind={type(error).__name__} message={json.dumps(str(error))}\n")
    sys.stderr.flush()


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    args = parse_args(argv)
    logger = logging.getLogger(__name__)

    try:
        config = Config(args.config)
        apply_overrides(args, config)
        setup_logging(config.log_level, config.log_file, config.max_size, config.backup_count)
        return dispatch(args, config)

    except SRError as e:
        logger.error(f"{args.command} failed: {e}")
        report_failure(e, e.exit_code)
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(f"{args.command} failed: {e}")
        report_failure(e, 3)
        return 3
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        report_failure(e, 1)
        return 1


if __name__ == "__main__":
    sys.exit(main())
