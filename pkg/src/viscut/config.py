"""Flat key-value training/run configuration files.

Format: one ``key = value`` per line; blank lines and ``#`` comments are
ignored. Unknown keys are rejected and every numeric key is range-checked.
Documented keys: c_reg, k, epsilon, max_iters, scale_step, n_levels,
cell_size, nms_iou.
"""

from __future__ import annotations

from pathlib import Path

from .learning import TrainConfig

_SPECS = {
    "c_reg": (float, lambda v: v > 0, "must be positive"),
    "k": (int, lambda v: v >= 2, "must be >= 2"),
    "epsilon": (float, lambda v: v > 0, "must be positive"),
    "max_iters": (int, lambda v: v >= 0, "must be >= 0"),
    "scale_step": (float, lambda v: 0 < v < 1, "must be in (0, 1)"),
    "n_levels": (int, lambda v: v >= 1, "must be >= 1"),
    "cell_size": (int, lambda v: v >= 2, "must be >= 2"),
    "nms_iou": (float, lambda v: 0 < v < 1, "must be in (0, 1)"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, _, val = (p.strip() for p in line.partition("="))
        if key not in _SPECS:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        typ, check, why = _SPECS[key]
        try:
            parsed = typ(val)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {key} is not {typ.__name__}") from exc
        if not check(parsed):
            raise ValueError(f"{source}:{lineno}: {key} {why}")
        values[key] = parsed
    return values


def load_config(path) -> TrainConfig:
    p = Path(path)
    values = parse_config_text(p.read_text(), source=str(p))
    return TrainConfig(**values)


def write_config(config: TrainConfig, path) -> None:
    keys = list(_SPECS)
    with open(path, "w") as f:
        for key in keys:
            f.write(f"{key} = {getattr(config, key)}\n")
