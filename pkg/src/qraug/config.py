"""Layered run configuration.

One TOML table per section. Values are resolved from lowest to highest
precedence: built-in defaults, the named profile, the config file,
``QRAUG_<SECTION>_<KEY>`` environment variables, then explicit overrides
(the command line).
"""

import logging
import os
import sys
import types
import typing
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .augmenter import AugmentConfig
from .encoder import EncoderConfig
from .retrieval import RetrievalConfig
from .scst import ScstConfig
from .seq2seq import ModelConfig, TrainConfig
from .synthetic import corruption_weights

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["PROFILES", "SECTIONS", "CorpusConfig", "ExperimentConfig", "Config"]

logger = logging.getLogger(__name__)

ENV_PREFIX = "QRAUG_"


@dataclass
class CorpusConfig:
    seed: int = 0
    n_pairs: int = 5000
    min_count: int = 1
    dev_fraction: float = 0.1
    weights: dict[str, float] | None = None  #: Corruption mix; None uses the default mix

    def __post_init__(self) -> None:
        if self.n_pairs < 1:
            raise ValueError("corpus.n_pairs must be positive")
        if self.min_count < 1:
            raise ValueError("corpus.min_count must be at least 1")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ValueError("corpus.dev_fraction must be in [0, 1)")
        if self.weights is not None:
            try:
                corruption_weights(self.weights)
            except ValueError as e:
                raise ValueError(f"corpus.weights: {e}") from None


@dataclass
class ExperimentConfig:
    seed: int = 0
    pool_size: int = 4000  #: Golden rewrites indexed and fed to the augmenter
    train_pairs: int = 1000
    test_pairs: int = 500  #: Per testset
    arms: tuple[str, ...] = ("mle", "phonetic", "semantic", "combined")
    augment: bool = True  #: False gives every arm an empty synthetic set

    def __post_init__(self) -> None:
        self.arms = tuple(self.arms)
        for name in ("pool_size", "train_pairs", "test_pairs"):
            if getattr(self, name) < 1:
                raise ValueError(f"experiment.{name} must be positive")
        if self.train_pairs > self.pool_size:
            raise ValueError("experiment.train_pairs must not exceed experiment.pool_size")
        allowed = ("mle", "phonetic", "semantic", "combined")
        for arm in self.arms:
            if arm not in allowed:
                raise ValueError(f"experiment.arms: unknown arm {arm!r}. Valid options: {', '.join(allowed)}")
        if len(set(self.arms)) != len(self.arms):
            raise ValueError("experiment.arms must not repeat")


SECTIONS: dict[str, type] = {
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "encoder": EncoderConfig,
    "scst": ScstConfig,
    "augment": AugmentConfig,
    "retrieval": RetrievalConfig,
    "experiment": ExperimentConfig,
}

#: Named override sets applied on top of the built-in defaults
PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "full": {},
    "desk": {
        "model": {"d_tok": 64, "d_hid": 64, "d_ff": 128},
        "train": {"lr": 3e-4, "warmup_steps": 100, "steps": 1500, "eval_every": 100, "patience": 5},
        "encoder": {"steps": 600},
        "scst": {"lr": 1e-4, "steps": 300, "eval_every": 50},
        "retrieval": {"steps": 800},
    },
}


def _kind(tp: Any) -> tuple[Any, bool]:
    """(base type, optional) of an annotation."""
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def _coerce(where: str, tp: Any, value: Any) -> Any:
    """Check a file or override value against a field annotation."""
    base, optional = _kind(tp)
    if value is None:
        if optional:
            return None
        raise ValueError(f"{where} must not be empty")
    origin = typing.get_origin(base)
    if base is bool:
        ok = isinstance(value, bool)
    elif base is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif base is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif base is str:
        ok = isinstance(value, str)
    elif origin is tuple:
        item = typing.get_args(base)[0]
        ok = isinstance(value, (list, tuple))
        if ok:
            value = tuple(_coerce(f"{where}[{i}]", item, v) for i, v in enumerate(value))
    elif origin is dict:
        ok = isinstance(value, Mapping)
        if ok:
            value = {str(k): _coerce(f"{where}.{k}", float, v) for k, v in value.items()}
    else:
        ok = True
    if not ok:
        raise ValueError(f"{where} has the wrong type ({type(value).__name__})")
    return value


def _parse_env(where: str, tp: Any, text: str) -> Any:
    """Turn an environment string into a value of the field's type."""
    base, optional = _kind(tp)
    text = text.strip()
    if optional and text.lower() in ("", "none"):
        return None
    origin = typing.get_origin(base)
    try:
        if base is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if base in (int, float, str):
            return base(text)
        if origin is tuple:
            item = typing.get_args(base)[0]
            return tuple(item(x) for x in text.split(",") if x.strip())
        if origin is dict:
            return {k.strip(): float(v) for k, v in (kv.split("=", 1) for kv in text.split(",") if kv.strip())}
    except ValueError:
        raise ValueError(f"{where}: cannot parse {text!r}") from None
    return text


def _merge(layers: dict[str, dict[str, Any]], update: Mapping[str, Any], origin: str) -> None:
    for section, values in update.items():
        if section not in SECTIONS:
            raise ValueError(f"{origin}: unknown section {section!r}. Valid options: {', '.join(SECTIONS)}")
        if not isinstance(values, Mapping):
            raise ValueError(f"{origin}: section {section!r} must be a table")
        hints = typing.get_type_hints(SECTIONS[section])
        for key, value in values.items():
            where = f"{section}.{key}"
            if key not in hints:
                raise ValueError(f"{origin}: unknown key {where}")
            layers[section][key] = _coerce(where, hints[key], value)


def _environment(environ: Mapping[str, str]) -> tuple[str | None, dict[str, dict[str, Any]]]:
    profile = None
    update: dict[str, dict[str, Any]] = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        if rest == "profile":
            profile = environ[name]
            continue
        section, _, key = rest.partition("_")
        if section not in SECTIONS:
            raise ValueError(f"environment {name}: unknown section {section!r}")
        hints = typing.get_type_hints(SECTIONS[section])
        if key not in hints:
            raise ValueError(f"environment {name}: unknown key {section}.{key}")
        update.setdefault(section, {})[key] = _parse_env(f"{section}.{key}", hints[key], environ[name])
    return profile, update


@dataclass
class Config:
    """Every section's settings plus the profile they were resolved under."""

    profile: str = "full"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    scst: ScstConfig = field(default_factory=ScstConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    @classmethod
    def load(
        cls,
        path: str | Path | None = None,
        *,
        profile: str | None = None,
        environ: Mapping[str, str] | None = None,
        overrides: Mapping[str, Mapping[str, Any]] | None = None,
    ) -> "Config":
        """Resolve a configuration.

        Args:
            path: TOML file, or None for defaults only.
            profile: Profile name; beats the file's and the environment's.
            environ: Environment mapping, ``os.environ`` by default.
            overrides: ``{section: {key: value}}`` applied last.

        Raises:
            ValueError: On unknown profiles, sections or keys, wrong value
                types, or values a section rejects. Messages name
                ``section.key``.
            OSError: If the file cannot be read.
        """
        doc: dict[str, Any] = {}
        if path is not None:
            with open(path, "rb") as f:
                try:
                    doc = tomllib.load(f)
                except tomllib.TOMLDecodeError as e:
                    raise ValueError(f"{path}: {e}") from None
        file_profile = doc.pop("profile", None)
        env_profile, env_update = _environment(os.environ if environ is None else environ)
        name = profile or env_profile or file_profile or "full"
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r}. Valid options: {', '.join(PROFILES)}")
        layers: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
        _merge(layers, PROFILES[name], f"profile {name}")
        _merge(layers, doc, str(path))
        _merge(layers, env_update, "environment")
        if overrides:
            explicit = {s: {k: v for k, v in kv.items() if v is not None} for s, kv in overrides.items()}
            _merge(layers, explicit, "override")
        sections = {}
        for section, factory in SECTIONS.items():
            try:
                sections[section] = factory(**layers[section])
            except TypeError as e:
                raise ValueError(f"{section}: {e}") from None
        logger.debug("config resolved under profile %s", name)
        return cls(profile=name, **sections)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"profile": self.profile}
        for f in fields(self):
            if f.name != "profile":
                out[f.name] = asdict(getattr(self, f.name))
        return out
