"""
Flat ``key=value`` run configuration.

One file may carry both corpus and training settings.  Keys can be bare
(``epochs = 20``) or qualified (``train.epochs = 20``, ``corpus.n_test = 50``);
bare keys are resolved against whichever dataclass the command is building,
and qualified keys for the other section are ignored.  ``#`` starts a comment.
"""

from __future__ import annotations

import hashlib
from dataclasses import fields, replace

SECTIONS = ("corpus", "train")


class ConfigError(ValueError):
    pass


def parse_text(text, source="<config>"):
    """Ordered ``{key: raw string}``; duplicate keys are an error."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: {key} given twice")
        out[key] = value
    return out


def read_file(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from None
    return parse_text(text, path), hashlib.sha256(data).hexdigest()


def _coerce(name, default, raw):
    kind = type(default)
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}") from None


def apply(base, raw, section):
    """Return a copy of dataclass ``base`` updated from ``raw`` entries for ``section``."""
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    updates = {}
    for key, value in raw.items():
        sect, _, name = key.rpartition(".")
        if sect and sect not in SECTIONS:
            raise ConfigError(f"{key}: unknown section {sect!r}")
        if sect and sect != section:
            continue
        if name not in known:
            if not sect and _belongs_elsewhere(name, section):
                continue
            raise ConfigError(f"{key}: unknown {section} setting")
        updates[name] = _coerce(key, known[name], value)
    out = replace(base, **updates)
    try:
        out.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return out


def _belongs_elsewhere(name, section):
    # bare keys of the other section are allowed in a shared file
    from .corpus import CorpusConfig
    from .trainer import TrainConfig
    other = TrainConfig if section == "corpus" else CorpusConfig
    return name in {f.name for f in fields(other)}
