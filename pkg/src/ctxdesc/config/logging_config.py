import os
import logging.config
from pathlib import Path


def _log_file() -> Path | None:
    """Return the rotating log file path when file logging is enabled."""
    location = os.getenv("CTXDESC_LOG_FILE")
    if not location:
        return None
    path = Path(location)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# Logging configuration
def setup_logging(default_level=logging.INFO):
    """Setup logging configuration"""
    handlers = {
        "stdout": {
            "class": "logging.StreamHandler",
            "level": "DEBUG",
            "formatter": "standard",
            "stream": "ext://sys.stdout"
        },
        "stderr": {
            "class": "logging.StreamHandler",
            "level": "WARNING",
            "formatter": "standard",
            "stream": "ext://sys.stderr"
        },
    }
    package_handlers = ["stdout", "stderr"]

    log_file = _log_file()
    if log_file is not None:
        handlers["file"] = {
            "class": "logging.handlers.RotatingFileHandler",
            "level": "DEBUG",
            "formatter": "standard",
            "filename": str(log_file),
            "maxBytes": 10485760,  # 10MB
            "backupCount": 5,
            "encoding": "utf8"
        }
        package_handlers.append("file")

    log_config = {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "standard": {
                "format": "%(asctime)s [%(levelname)s] %(name)s: %(message)s",
                "datefmt": "%Y-%m-%d %H:%M:%S"
            },
        },
        "handlers": handlers,
        "loggers": {
            "ctxdesc": {
                "handlers": package_handlers,
                "level": "DEBUG",
                "propagate": False
            },
        },
        "root": {
            "handlers": ["stdout", "stderr"],
            "level": logging.getLevelName(default_level)
        }
    }

    # Apply the configuration
    logging.config.dictConfig(log_config)

    # Set log level based on environment
    if os.getenv("ENVIRONMENT") != "PRODUCTION":
        logging.getLogger("ctxdesc").setLevel(logging.DEBUG)
    else:
        logging.getLogger("ctxdesc").setLevel(logging.INFO)
