"""
Logging utilities for BALISTD
"""
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Union

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class AppLogger:
    """Thin wrapper around a named stdlib logger"""

    def __init__(self, name: str = "balistd", log_level: Optional[str] = None):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(logging.DEBUG)
        level = (log_level or os.getenv("BALISTD_LOG_LEVEL", "INFO")).upper()
        self.console_level = getattr(logging, level, logging.INFO)
        self._file_handler: Optional[logging.FileHandler] = None

        # Prevent duplicate handlers
        if not self.logger.handlers:
            self._setup_handlers()

    def _setup_handlers(self):
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(self.console_level)
        console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        self.logger.addHandler(console_handler)

    def attach_file(self, path: Union[str, Path]) -> None:
        """Send a full DEBUG-level copy of the log to ``path``"""
        self.detach_file()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(path)
        handler.setLevel(logging.DEBUG)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        self.logger.addHandler(handler)
        self._file_handler = handler

    def detach_file(self) -> None:
        if self._file_handler is not None:
            self.logger.removeHandler(self._file_handler)
            self._file_handler.close()
            self._file_handler = None

    def info(self, message: str, extra: Optional[dict] = None):
        self.logger.info(message, extra=extra or {})

    def warning(self, message: str, extra: Optional[dict] = None):
        self.logger.warning(message, extra=extra or {})

    def error(self, message: str, extra: Optional[dict] = None):
        self.logger.error(message, extra=extra or {})

    def debug(self, message: str, extra: Optional[dict] = None):
        self.logger.debug(message, extra=extra or {})


class RunLogger:
    """Logger facade used by the training and evaluation pipeline"""

    slow_threshold = 60.0

    def __init__(self):
        self.app_logger = AppLogger()

    def attach_run_dir(self, out_dir: Union[str, Path]) -> None:
        self.app_logger.attach_file(Path(out_dir) / "run.log")

    def detach_run_dir(self) -> None:
        self.app_logger.detach_file()

    @staticmethod
    def _with_details(message: str, details: dict) -> str:
        if not details:
            return message
        return message + " | " + " ".join(f"{key}={value}" for key, value in details.items())

    def info(self, message: str, **details):
        self.app_logger.info(self._with_details(message, details), extra={"details": details})

    def warning(self, message: str, **details):
        self.app_logger.warning(self._with_details(message, details), extra={"details": details})

    def debug(self, message: str, **details):
        self.app_logger.debug(self._with_details(message, details), extra={"details": details})

    def log_step(self, step: int, clean_loss: float, cor_loss: float,
                 e_hat: Optional[float] = None, baseline: Optional[float] = None):
        """Log a training step summary"""
        message = f"step {step}: clean_loss={clean_loss:.4f} cor_loss={cor_loss:.4f}"
        if e_hat is not None:
            message += f" E_hat={e_hat:.4f} baseline={baseline:.4f}"
        self.app_logger.info(message, extra={"step": step})

    def log_error(self, error: Exception, context: str = ""):
        """Log errors with context"""
        message = f"Error in {context}: {str(error)}"
        self.app_logger.error(message, extra={"error_type": type(error).__name__})

    def log_performance(self, operation: str, duration: float):
        """Log performance metrics"""
        message = f"Performance: {operation} took {duration:.2f}s"
        self.app_logger.debug(message, extra={"operation": operation, "duration": duration})

        if duration > self.slow_threshold:
            self.app_logger.warning(f"{operation} is taking longer than usual ({duration:.1f}s)")


# Global logger instance
app_logger = RunLogger()
