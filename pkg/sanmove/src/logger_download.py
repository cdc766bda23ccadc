import logging
import logging.config
import os
from typing import Optional

import yaml
from dotenv import find_dotenv, load_dotenv

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
DEFAULT_LOGGING_CFG = os.path.join(BASE_DIR, "configs", "logging.cfg.yml")
LOGGER_NAME = "sanmove"
FALLBACK_FORMAT = "[%(asctime)s | %(levelname)s]: %(message)s"

load_dotenv(find_dotenv())


def get_logger(logging_cfg_path: Optional[str] = None) -> logging.Logger:
    """
    Create the package logger from a YAML dictConfig.

    The path defaults to SANMOVE_LOGGING_CFG, then to the bundled config. A
    missing file falls back to a plain stderr handler with the same format.
    -------
    Returns
    logging.Logger
    """
    path = logging_cfg_path or os.getenv("SANMOVE_LOGGING_CFG") or DEFAULT_LOGGING_CFG
    if not os.path.exists(path):
        logging.basicConfig(level=logging.INFO, format=FALLBACK_FORMAT)
        logger_model = logging.getLogger(LOGGER_NAME)
        logger_model.warning(f"[Logging] Config {path} not found, using defaults")
        return logger_model

    with open(path) as stream:
        config = yaml.safe_load(stream.read())
    loggers = config.get("loggers") or {LOGGER_NAME: {}}
    logger_name = LOGGER_NAME if LOGGER_NAME in loggers else list(loggers)[0]
    logging.config.dictConfig(config)
    return logging.getLogger(logger_name)


logger = get_logger()
