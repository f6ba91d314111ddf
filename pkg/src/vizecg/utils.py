"""Helpers for config assembly and seeding."""

from ast import literal_eval
from collections.abc import Mapping
from typing import Any

import numpy as np
from template_dict import Template

__all__ = ["Template", "merge_dicts", "eval_string", "derive_seed"]

_KEYWORDS = {"true": True, "false": False, "none": None, "null": None}


def merge_dicts(*dicts: Mapping) -> dict:
    """Recursively merge config layers into a new dict, later layers win.

    >>> merge_dicts({"train": {"epochs": 30, "lr_max": 1e-3}}, {"train": {"epochs": 5}})
    {'train': {'epochs': 5, 'lr_max': 0.001}}

    Only mappings are merged. Lists replace each other, a section never receives concatenated widths:

    >>> merge_dicts({"model": {"widths": [16, 32, 64]}}, {"model": {"widths": [4, 4, 8]}})
    {'model': {'widths': [4, 4, 8]}}
    """
    result: dict = {}
    for layer in dicts:
        for key, value in layer.items():
            current = result.get(key)
            if isinstance(current, Mapping) and isinstance(value, Mapping):
                value = merge_dicts(current, value)
            result[key] = value
    return result


def eval_string(value: str, /) -> Any:
    """Turn an env value (`-e KEY=VALUE` or an OS variable) into a Python literal.

    `true`, `false`, `none` and `null` are recognized in any case, a blank value is `None`.

    >>> eval_string('False'), eval_string('  ')
    (False, None)

    Anything else goes through `literal_eval()` and is kept as text when that fails.

    >>> eval_string('1e-3'), eval_string('[0, 1]'), eval_string('tiny')
    (0.001, [0, 1], 'tiny')
    """
    value = value.strip()
    if not value:
        return None
    if value.lower() in _KEYWORDS:
        return _KEYWORDS[value.lower()]
    try:
        return literal_eval(value)
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
        return value


def derive_seed(seed: int, *keys: int) -> int:
    """Child 64-bit seed of `seed` for the integer path `keys`, e.g. `derive_seed(seed, record_index)`.

    >>> derive_seed(7, 0) == derive_seed(7, 0), derive_seed(7, 0) == derive_seed(7, 1)
    (True, False)
    """
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])
