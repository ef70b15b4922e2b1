import json
from enum import Enum
from functools import wraps
from pathlib import Path
from typing import Any, Dict

import yaml

from .types import PathType


# add multi representers for Path and str enums, for YAML serialization
class MySafeDumper(yaml.SafeDumper):
    pass


MySafeDumper.add_multi_representer(
    Path, lambda dumper, data: dumper.represent_str(str(data))
)
MySafeDumper.add_multi_representer(
    Enum, lambda dumper, data: dumper.represent_str(str(data.value))
)
MySafeDumper.add_representer(
    tuple, lambda dumper, data: dumper.represent_list(list(data))
)


@wraps(yaml.dump)
def yaml_dump(*args, **kwargs):
    kwargs.setdefault("Dumper", MySafeDumper)
    kwargs.setdefault("allow_unicode", True)
    kwargs.setdefault("sort_keys", False)
    return yaml.dump(*args, **kwargs)


@wraps(yaml.safe_load)
def yaml_load(*args, **kwargs):
    return yaml.safe_load(*args, **kwargs)


@wraps(json.dump)
def json_dump(*args, **kwargs):
    kwargs.setdefault("ensure_ascii", False)
    kwargs.setdefault("indent", 2)
    return json.dump(*args, **kwargs)


@wraps(json.dumps)
def json_dumps(*args, **kwargs):
    kwargs.setdefault("ensure_ascii", False)
    kwargs.setdefault("indent", 2)
    kwargs.setdefault("default", str)
    return json.dumps(*args, **kwargs)


@wraps(json.load)
def json_load(*args, **kwargs):
    return json.load(*args, **kwargs)


def _parse_scalar(text: str) -> Any:
    # YAML scalar rules: ints, floats, booleans, null, [lists]
    value = yaml_load(text) if text else ""
    return text if isinstance(value, dict) else value


def kv_loads(text: str) -> Dict[str, Any]:
    """Parse line-oriented ``key=value`` text; dotted keys build nested dicts."""
    obj: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", maxsplit=1)
        *parents, leaf = [part.strip() for part in key.strip().split(".")]
        node = obj
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"line {lineno}: {key.strip()!r} conflicts with a scalar")
        node[leaf] = _parse_scalar(value.strip())
    return obj


def load_config_file(path: PathType) -> Dict[str, Any]:
    """Load a config mapping, the format determined by the file suffix."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fin:
        if path.suffix in (".yaml", ".yml"):
            content = yaml_load(fin)
        elif path.suffix == ".json":
            content = json_load(fin)
        else:
            content = kv_loads(fin.read())
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ValueError(f"{path}: config must be a mapping, got {type(content).__name__}")
    return content


def dump_config_file(obj: Dict[str, Any], path: PathType):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fout:
        if path.suffix == ".json":
            json_dump(obj, fout)
        else:
            yaml_dump(obj, fout, default_flow_style=False)
