"""Plain-text, versioned, self-describing files.

Every file starts with one header line ``# {json}`` holding the file kind, the
format version, the column names and free-form metadata (config echo, seed,
task description). Tab-separated rows follow. Floats are written with
``repr`` so that reading a file back reproduces every value exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import FORMAT_VERSION, Examples, PreferencePairs, UsageError
from .models import RewardParams, TaskInstance


class FormatError(UsageError):
    pass


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps_table(kind: str, columns, rows, meta: dict | None = None) -> str:
    header = {"kind": kind, "version": FORMAT_VERSION, "columns": list(columns),
              "meta": _jsonable(meta or {})}
    lines = ["# " + json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines.append("\t".join(columns))
    for row in rows:
        lines.append("\t".join(_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def write_table(path, kind: str, columns, rows, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_table(kind, columns, rows, meta), encoding="utf-8")
    return path


def read_table(path, kind: str | None = None):
    """Return (meta, columns, rows) with rows as lists of strings."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input file: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2 or not lines[0].startswith("# "):
        raise FormatError(f"{path}: missing header line")
    header = json.loads(lines[0][2:])
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('version')!r}")
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} file, found {header.get('kind')!r}")
    columns = header["columns"]
    if lines[1].split("\t") != columns:
        raise FormatError(f"{path}: column line does not match header")
    rows = [line.split("\t") for line in lines[2:]]
    if any(len(r) != len(columns) for r in rows):
        raise FormatError(f"{path}: ragged row")
    return header["meta"], columns, rows


# -- tasks and datasets ----------------------------------------------------------

def write_task(path, task: TaskInstance, meta: dict | None = None) -> Path:
    p, q = task.p, task.q
    columns = (["x", "y", "length", "prompt_prob", "response_prob"]
               + [f"psi_{i}" for i in range(p)] + [f"psir_{i}" for i in range(q)])
    rows = []
    for x in range(task.n_prompts):
        for y in range(int(task.n_candidates[x])):
            rows.append([x, y, task.lengths[x, y], task.prompt_probs[x], task.response_probs[x, y],
                         *task.policy_features[x, y], *task.reward_features[x, y]])
    info = {
        "task_id": task.task_id, "split": task.split, "tabular": task.tabular,
        "n_prompts": task.n_prompts, "max_candidates": task.max_candidates, "p": p, "q": q,
        "n_candidates": task.n_candidates,
        "true_weights": None if task.true_weights is None else task.true_weights,
    }
    return write_table(path, "task", columns, rows, {**(meta or {}), "task": info})


def read_task(path) -> TaskInstance:
    meta, _, rows = read_table(path, "task")
    info = meta["task"]
    n_x, n_y, p, q = info["n_prompts"], info["max_candidates"], info["p"], info["q"]
    pf = np.zeros((n_x, n_y, p))
    rf = np.zeros((n_x, n_y, q))
    lengths = np.ones((n_x, n_y), dtype=np.int64)
    px = np.zeros(n_x)
    py = np.zeros((n_x, n_y))
    for row in rows:
        x, y = int(row[0]), int(row[1])
        lengths[x, y] = int(row[2])
        px[x] = float(row[3])
        py[x, y] = float(row[4])
        values = np.array([float(v) for v in row[5:]])
        pf[x, y], rf[x, y] = values[:p], values[p:]
    tw = info["true_weights"]
    return TaskInstance(pf, rf, lengths, px, py, n_candidates=info["n_candidates"],
                        true_weights=None if tw is None else np.array(tw, dtype=np.float64),
                        task_id=info["task_id"], split=info["split"], tabular=info["tabular"])


def write_examples(path, data: Examples, meta: dict | None = None) -> Path:
    return write_table(path, "examples", ["x", "y"], zip(data.x, data.y), meta)


def read_examples(path) -> Examples:
    _, _, rows = read_table(path, "examples")
    arr = np.array(rows, dtype=np.int64).reshape(-1, 2)
    return Examples(arr[:, 0], arr[:, 1])


def write_prefs(path, data: PreferencePairs, meta: dict | None = None) -> Path:
    return write_table(path, "prefs", ["x", "preferred", "dispreferred"],
                       zip(data.x, data.preferred, data.dispreferred), meta)


def read_prefs(path) -> PreferencePairs:
    _, _, rows = read_table(path, "prefs")
    arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return PreferencePairs(arr[:, 0], arr[:, 1], arr[:, 2])


# -- parameters ------------------------------------------------------------------

def write_vector(path, kind: str, values, meta: dict | None = None) -> Path:
    return write_table(path, kind, ["index", "value"], enumerate(np.asarray(values)), meta)


def read_vector(path, kind: str):
    meta, _, rows = read_table(path, kind)
    return meta, np.array([float(r[1]) for r in rows])


def write_reward(path, phi: RewardParams, meta: dict | None = None) -> Path:
    return write_vector(path, "reward", phi.phi, {**(meta or {}), "r_max": phi.r_max})


def read_reward(path) -> RewardParams:
    meta, values = read_vector(path, "reward")
    return RewardParams(values, float(meta["r_max"]))


def write_policy(path, theta, meta: dict | None = None) -> Path:
    return write_vector(path, "policy", theta, meta)


def read_policy(path) -> np.ndarray:
    return read_vector(path, "policy")[1]
