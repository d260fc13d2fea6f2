"""Experiment configuration files: a strict line-oriented key/value format.

The format is a YAML subset matching the simulator's configuration style:
nested mappings by two-space indentation, ``key: value`` leaves, inline
scalar lists like ``[0, 0.5, 1]``, full-line ``#`` comments.  No anchors,
aliases, or multi-line values — every accepted file re-serializes to an
equivalent structure, and unknown keys are rejected with their line number
so typos cannot silently fall back to defaults.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .costs import CostParams
from .distill import DistillConfig, UPDATE_MODES
from .orchestrator import STRATEGIES, DataConfig, ExperimentConfig, OptimizerConfig
from .resources import LimitSpec, RangeLimit, TraceLimit
from .subnets import SearchSpace


class ConfigError(Exception):
    """Configuration problem; the message carries file/line context."""


@dataclass
class ConfigDoc:
    data: dict
    key_lines: dict[tuple, int]
    source: str

    def line_of(self, path: tuple) -> int | None:
        return self.key_lines.get(path)


def _parse_scalar(token: str):
    if len(token) >= 2 and token[0] == token[-1] and token[0] in "\"'":
        return token[1:-1]
    low = token.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if low in ("null", "none", "~"):
        return None
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def _parse_value(token: str, source: str, lineno: int):
    if token.startswith("["):
        if not token.endswith("]"):
            raise ConfigError(f"{source}:{lineno}: unterminated list")
        inner = token[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part.strip()) for part in inner.split(",")]
    return _parse_scalar(token)


def parse_config(text: str, source: str = "<config>") -> ConfigDoc:
    """Parse config text into nested dicts, remembering each key's line."""
    root: dict = {}
    key_lines: dict[tuple, int] = {}
    # stack of (indent, mapping, path)
    stack: list[tuple[int, dict, tuple]] = [(-1, root, ())]

    for lineno, raw in enumerate(text.splitlines(), start=1):
        if "\t" in raw:
            raise ConfigError(f"{source}:{lineno}: tabs are not allowed, use spaces")
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indent = len(raw) - len(raw.lstrip(" "))
        if indent % 2:
            raise ConfigError(f"{source}:{lineno}: indentation must be a multiple of 2")

        while stack and indent <= stack[-1][0]:
            stack.pop()
        if not stack:
            raise ConfigError(f"{source}:{lineno}: bad indentation")
        parent_indent, parent, path = stack[-1]
        if indent != parent_indent + 2 and not (parent is root and indent == 0):
            raise ConfigError(f"{source}:{lineno}: unexpected indentation level")

        key, sep, rest = stripped.partition(":")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key:' or 'key: value'")
        if key in parent:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        rest = rest.strip()
        key_path = path + (key,)
        key_lines[key_path] = lineno
        if rest:
            parent[key] = _parse_value(rest, source, lineno)
        else:
            child: dict = {}
            parent[key] = child
            stack.append((indent, child, key_path))

    return ConfigDoc(data=root, key_lines=key_lines, source=source)


def _format_scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, str):
        needs_quotes = (
            not value
            or value != value.strip()
            or any(ch in value for ch in ":#[],\"'")
            or value.lower() in ("true", "false", "null", "none", "~")
        )
        return f'"{value}"' if needs_quotes else value
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(data: dict, indent: int = 0) -> str:
    """Serialize a parsed tree back to the same format (round-trips)."""
    lines = []
    pad = " " * indent
    for key, value in data.items():
        if isinstance(value, dict):
            lines.append(f"{pad}{key}:")
            lines.append(dump_config(value, indent + 2))
        elif isinstance(value, list):
            inner = ", ".join(_format_scalar(v) for v in value)
            lines.append(f"{pad}{key}: [{inner}]")
        else:
            lines.append(f"{pad}{key}: {_format_scalar(value)}")
    return "\n".join(line for line in lines if line != "")


def load_config_file(path: str) -> ConfigDoc:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read(), source=path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# schema: section -> key -> default (REQUIRED means the user must supply it)

_REQUIRED = object()

_SCHEMA: dict[str, Any] = {
    "clients": {"total": _REQUIRED, "per_round": _REQUIRED, "local_epochs": 1},
    "rounds": _REQUIRED,
    "batch": 64,
    "strategy": "flexible_search",
    "seed": 1,
    "output_dir": "runs",
    "aggregation": "weighted",
    "search": {
        "epsilon": 0.8,
        "t_max": 5,
        "ratios": _REQUIRED,
        "hidden": _REQUIRED,
        "depth": _REQUIRED,
    },
    "optimizer": {
        "kind": "sgd",
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "milestones": [0.6, 0.85],
        "decay_factor": 0.1,
    },
    "distill": {
        "enabled": True,
        "n": None,  # defaults to clients.per_round
        "t_skd": 100,
        "k": 64,
        "lr": 0.001,
        "mode": "aggregate_weights",
        "for_uniform_prune": False,
    },
    "limitation": {
        "memory": {"binary": False, "min": None, "max": None, "log_path": None, "phase_offset_s": 0.0},
        "bandwidth": {"binary": False, "min": None, "max": None, "log_path": None, "phase_offset_s": 0.0},
    },
    "cost": {
        "bytes_per_param": 8.0,
        "train_overhead_factor": 3.0,
        "bytes_per_activation": 8.0,
        "comm_deadline_s": 1.0,
        "protocol_overhead_factor": 1.0,
        "train_step_s_per_param": 1e-8,
    },
    "data": {
        "classes": _REQUIRED,
        "in_dim": _REQUIRED,
        "per_class": _REQUIRED,
        "partition": "iid",
        "alpha": 1.0,
        "test_fraction": 0.1,
    },
}


def _reject_unknown(doc: ConfigDoc, data: dict, schema: dict, path: tuple) -> None:
    for key, value in data.items():
        if key not in schema:
            line = doc.line_of(path + (key,))
            where = f"{doc.source}:{line}: " if line else f"{doc.source}: "
            dotted = ".".join(path + (key,))
            raise ConfigError(f"{where}unknown key {dotted!r}")
        if isinstance(schema[key], dict) and isinstance(value, dict):
            _reject_unknown(doc, value, schema[key], path + (key,))
        elif isinstance(schema[key], dict) and not isinstance(value, dict):
            raise ConfigError(
                f"{doc.source}: key {'.'.join(path + (key,))!r} must be a section"
            )
        elif not isinstance(schema[key], dict) and isinstance(value, dict):
            raise ConfigError(
                f"{doc.source}: key {'.'.join(path + (key,))!r} must be a value, not a section"
            )


def _resolve(doc: ConfigDoc, path: tuple, notices: list[str]):
    """Fetch a leaf, falling back to the schema default (noting it)."""
    node: Any = doc.data
    for part in path:
        if not isinstance(node, dict) or part not in node:
            node = None
            break
        node = node[part]
    if node is not None:
        return node
    default: Any = _SCHEMA
    for part in path:
        default = default[part]
    if default is _REQUIRED:
        raise ConfigError(f"{doc.source}: missing required key {'.'.join(path)!r}")
    if default is not None:
        notices.append(f"{'.'.join(path)}={_format_scalar(default)}")
    return default


def _build_limit(doc: ConfigDoc, resource: str):
    block = doc.data.get("limitation", {}).get(resource)
    if not isinstance(block, dict):
        raise ConfigError(
            f"{doc.source}: limitation.{resource} must be a section with either "
            "min/max or log_path"
        )
    has_range = "min" in block or "max" in block
    has_trace = "log_path" in block
    if has_range == has_trace:
        raise ConfigError(
            f"{doc.source}: limitation.{resource} needs exactly one of "
            "min/max or log_path"
        )
    if has_trace:
        return TraceLimit(
            log_path=str(block["log_path"]),
            phase_offset_s=float(block.get("phase_offset_s", 0.0)),
        )
    if "min" not in block or "max" not in block:
        raise ConfigError(f"{doc.source}: limitation.{resource} needs both min and max")
    return RangeLimit(
        min=float(block["min"]),
        max=float(block["max"]),
        binary=bool(block.get("binary", False)),
    )


def build_experiment(
    doc: ConfigDoc,
    seed: int | None = None,
    strategy: str | None = None,
) -> tuple[ExperimentConfig, list[str]]:
    """Validate a parsed config and turn it into an ExperimentConfig.

    Returns the config plus a list of defaulted keys (for the CLI notice).
    Raises ConfigError (never ValueError) so the CLI can map it to exit 2.
    """
    _reject_unknown(doc, doc.data, _SCHEMA, ())
    notices: list[str] = []

    def get(*path):
        return _resolve(doc, path, notices)

    try:
        ratios = get("search", "ratios")
        if not isinstance(ratios, list) or not ratios:
            raise ConfigError(f"{doc.source}: search.ratios must be a nonempty list")
        space = SearchSpace(
            in_dim=int(get("data", "in_dim")),
            hidden_width=int(get("search", "hidden")),
            hidden_depth=int(get("search", "depth")),
            classes=int(get("data", "classes")),
            ratios=tuple(float(r) for r in ratios),
        )
        per_round = int(get("clients", "per_round"))
        n_distill = get("distill", "n")
        if n_distill is None:
            n_distill = per_round
        milestones = get("optimizer", "milestones")
        if not isinstance(milestones, list):
            raise ConfigError(f"{doc.source}: optimizer.milestones must be a list")
        mode = str(get("distill", "mode"))
        if mode not in UPDATE_MODES:
            raise ConfigError(f"{doc.source}: distill.mode must be one of {UPDATE_MODES}")
        aggregation = str(get("aggregation"))
        if aggregation not in ("weighted", "unweighted"):
            raise ConfigError(f"{doc.source}: aggregation must be weighted or unweighted")
        chosen_strategy = strategy if strategy is not None else str(get("strategy"))
        if chosen_strategy not in STRATEGIES:
            raise ConfigError(f"{doc.source}: strategy must be one of {STRATEGIES}")

        cfg = ExperimentConfig(
            space=space,
            total_clients=int(get("clients", "total")),
            clients_per_round=per_round,
            local_epochs=int(get("clients", "local_epochs")),
            rounds=int(get("rounds")),
            batch=int(get("batch")),
            strategy=chosen_strategy,
            limits=LimitSpec(
                memory=_build_limit(doc, "memory"),
                bandwidth=_build_limit(doc, "bandwidth"),
            ),
            cost=CostParams(
                bytes_per_param=float(get("cost", "bytes_per_param")),
                train_overhead_factor=float(get("cost", "train_overhead_factor")),
                bytes_per_activation=float(get("cost", "bytes_per_activation")),
                comm_deadline_s=float(get("cost", "comm_deadline_s")),
                protocol_overhead_factor=float(get("cost", "protocol_overhead_factor")),
                train_step_s_per_param=float(get("cost", "train_step_s_per_param")),
            ),
            optimizer=OptimizerConfig(
                kind=str(get("optimizer", "kind")),
                learning_rate=float(get("optimizer", "lr")),
                momentum=float(get("optimizer", "momentum")),
                weight_decay=float(get("optimizer", "weight_decay")),
                milestones=tuple(float(m) for m in milestones),
                decay_factor=float(get("optimizer", "decay_factor")),
            ),
            data=DataConfig(
                classes=int(get("data", "classes")),
                in_dim=int(get("data", "in_dim")),
                per_class=int(get("data", "per_class")),
                partition=str(get("data", "partition")),
                alpha=float(get("data", "alpha")),
                test_fraction=float(get("data", "test_fraction")),
            ),
            distill=DistillConfig(
                n=int(n_distill),
                t_skd=int(get("distill", "t_skd")),
                batch=int(get("distill", "k")),
                learning_rate=float(get("distill", "lr")),
                update_mode=mode,
            ),
            distill_enabled=bool(get("distill", "enabled")),
            distill_for_uniform_prune=bool(get("distill", "for_uniform_prune")),
            epsilon=float(get("search", "epsilon")),
            t_max=int(get("search", "t_max")),
            weighted_aggregation=aggregation == "weighted",
            seed=int(seed if seed is not None else get("seed")),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{doc.source}: {exc}") from exc

    return cfg, notices


def output_dir_of(doc: ConfigDoc) -> str:
    value = doc.data.get("output_dir", _SCHEMA["output_dir"])
    return str(value)
