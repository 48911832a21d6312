"""
Logging module for sdfrecon.

Every module logs through a child of the ``sdfrecon`` logger. The console
handler goes through ``tqdm.write`` so log lines do not tear the training
progress bar, and a training run can mirror the package log into a
``run.log`` file inside its run directory.
"""

import logging
import os
import sys
from contextlib import contextmanager
from typing import Iterator, Optional

from tqdm import tqdm


ROOT_LOGGER_NAME = 'sdfrecon'
DEFAULT_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s'


class TqdmHandler(logging.StreamHandler):
    """Console handler that prints above an active tqdm bar."""

    def __init__(self, stream=None):
        super().__init__(stream or sys.stdout)

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record), file=self.stream)
            self.flush()
        except Exception:
            self.handleError(record)


class LoggerConfig:
    """
    Package logger setup.

    ``setup_logger`` attaches a single console handler to the ``sdfrecon``
    logger; repeated calls only change the level. Run log files are added and
    removed around a training run with ``run_log_file``.
    """

    _configured = False

    @staticmethod
    def setup_logger(
        name: str = ROOT_LOGGER_NAME,
        level: str = 'INFO',
        format_string: Optional[str] = None
    ) -> logging.Logger:
        """
        Set up and configure the package logger.

        Args:
            name: Logger name
            level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
            format_string: Custom format string for log messages

        Returns:
            Configured logger instance
        """
        logger = logging.getLogger(name)
        log_level = getattr(logging, level.upper(), logging.INFO)
        logger.setLevel(log_level)

        console = [h for h in logger.handlers if isinstance(h, TqdmHandler)]
        if LoggerConfig._configured and console:
            for handler in console:
                handler.setLevel(log_level)
            return logger

        handler = TqdmHandler()
        handler.setLevel(log_level)
        handler.setFormatter(logging.Formatter(format_string or DEFAULT_FORMAT))
        logger.addHandler(handler)
        logger.propagate = False

        LoggerConfig._configured = True
        return logger

    @staticmethod
    def get_logger(name: str = ROOT_LOGGER_NAME) -> logging.Logger:
        """Logger ``name`` placed below the package root (``sdfrecon.<name>``)."""
        if name == ROOT_LOGGER_NAME or name.startswith(ROOT_LOGGER_NAME + '.'):
            return logging.getLogger(name)
        return logging.getLogger(f'{ROOT_LOGGER_NAME}.{name}')

    @staticmethod
    @contextmanager
    def run_log_file(path: str, level: str = 'DEBUG') -> Iterator[logging.Handler]:
        """
        Mirror the package log into ``path`` for the duration of the block.

        The file is appended to, so a resumed or repeated run keeps its history.
        The package logger's level still gates what reaches the file.
        """
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        logger = logging.getLogger(ROOT_LOGGER_NAME)
        handler = logging.FileHandler(path, mode='a', encoding='utf-8')
        handler.setLevel(getattr(logging, level.upper(), logging.DEBUG))
        handler.setFormatter(logging.Formatter(DEFAULT_FORMAT))
        logger.addHandler(handler)
        try:
            yield handler
        finally:
            logger.removeHandler(handler)
            handler.close()


def setup_logging(log_level: str = 'INFO') -> logging.Logger:
    """
    Convenience function to set up logging for the application.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)

    Returns:
        Configured package root logger instance
    """
    return LoggerConfig.setup_logger(level=log_level)


def get_logger(name: str) -> logging.Logger:
    """Logger for a module, typically called with ``__name__``."""
    return LoggerConfig.get_logger(name)


def run_log_file(path: str, level: str = 'DEBUG'):
    """Context manager writing the package log to ``path``; see ``LoggerConfig.run_log_file``."""
    return LoggerConfig.run_log_file(path, level)
