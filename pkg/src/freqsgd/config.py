"""Flat dotted-key config files for experiment runs.

Format: one `key = value` pair per line, `#` starts a comment, blank lines
ignored. Environment variables are never consulted; together with the seed,
the parsed mapping fully determines a run.
"""
from __future__ import annotations

import os

# key -> (parser, default). Defaults are strings exactly as a user would
# write them, so the manifest echo round-trips.
SCHEMA: dict[str, tuple] = {
    "data.kind": (str, "synthetic"),
    "data.path": (str, ""),
    "data.users": (int, "100"),
    "data.items": (int, "100"),
    "data.tail": (str, "poly"),
    "data.tau": (float, "1.0"),
    "data.nu": (float, "2.0"),
    "data.examples": (int, "100000"),
    "model.kind": (str, "fm"),
    "model.dim": (int, "64"),
    "opt.kind": (str, "sgd-constant"),
    "opt.alpha": (float, "0.01"),
    "opt.L": (float, "1.0"),
    "opt.T": (int, "0"),
    "opt.eps": (float, "1e-10"),
    "opt.beta1": (float, "0.9"),
    "opt.beta2": (float, "0.999"),
    "opt.batch": (int, "1024"),
    "opt.project_radius": (float, "0.0"),
    "run.epochs": (int, "20"),
    "run.seed": (int, "0"),
    "run.patience": (int, "2"),
    "run.stride": (int, "0"),
    "run.out": (str, ""),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse dotted-key lines into a raw string mapping, strictly validated."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}; "
                             f"valid keys: {', '.join(sorted(SCHEMA))}")
        if key in raw:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def load_config_file(path) -> dict[str, str]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def resolve(raw: dict[str, str]) -> dict[str, object]:
    """Apply defaults and coerce every value to its schema type."""
    out: dict[str, object] = {}
    for key, (parser, default) in SCHEMA.items():
        text = raw.get(key, default)
        try:
            out[key] = parser(text)
        except ValueError:
            raise ValueError(f"config key {key!r}: cannot parse {text!r} as {parser.__name__}")
    return out
