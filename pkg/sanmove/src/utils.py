from __future__ import annotations

import json
import os

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
CONFIG_PATH = os.path.join(BASE_DIR, "configs")

with open(os.path.join(CONFIG_PATH, "messages.json"), "r", encoding="utf-8") as f:
    reply_messages = json.load(f)


def get_reply_text(key: str, **kwargs) -> str:
    """
    Return text for a key, formatted with `kwargs`.
    Keys and messages can be found in the messages.json.
    """
    text = reply_messages[key]
    return text.format(**kwargs) if kwargs else text


def env_workers(default: int = 1) -> int:
    """Worker count from SANMOVE_WORKERS, falling back to `default` when unset or invalid."""
    value = os.environ.get("SANMOVE_WORKERS")
    try:
        return max(1, int(value)) if value else default
    except ValueError:
        return default
