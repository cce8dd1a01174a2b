"""Task persistence: a small key-value interface with a file-backed default.

On-disk layout per task::

    <root>/tasks/<task_id>/spec.json
    <root>/tasks/<task_id>/state.json
    <root>/tasks/<task_id>/models/v<N>.bin
    <root>/tasks/<task_id>/metrics.jsonl

JSON documents are written canonically (sorted keys, fixed separators) so a
snapshot/restore/snapshot cycle is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import StoreError


def canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


class MemoryTaskStore:
    """In-memory store; the default when no data root is configured."""

    def __init__(self):
        self._docs: dict[tuple[str, str], bytes] = {}
        self._lines: dict[tuple[str, str], list[bytes]] = {}

    def list_tasks(self) -> list[str]:
        return sorted({task_id for task_id, _ in self._docs})

    def put_json(self, task_id: str, name: str, obj) -> None:
        self._docs[(task_id, name)] = canonical_json(obj)

    def get_json(self, task_id: str, name: str):
        raw = self._docs.get((task_id, name))
        if raw is None:
            return None
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise StoreError(f"corrupt document {name} for task {task_id}: {exc}") from exc

    def get_raw(self, task_id: str, name: str) -> bytes | None:
        return self._docs.get((task_id, name))

    def put_blob(self, task_id: str, name: str, data: bytes) -> None:
        self._docs[(task_id, name)] = bytes(data)

    def get_blob(self, task_id: str, name: str) -> bytes:
        raw = self._docs.get((task_id, name))
        if raw is None:
            raise StoreError(f"missing blob {name} for task {task_id}")
        return raw

    def append_jsonl(self, task_id: str, name: str, obj) -> None:
        line = json.dumps(obj, sort_keys=True).encode("utf-8")
        self._lines.setdefault((task_id, name), []).append(line)

    def read_jsonl(self, task_id: str, name: str) -> list:
        return [json.loads(line) for line in self._lines.get((task_id, name), [])]


class FileTaskStore:
    """Durable store rooted at a directory; one subdirectory per task."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "tasks").mkdir(parents=True, exist_ok=True)

    def _task_dir(self, task_id: str) -> Path:
        if "/" in task_id or task_id in ("", ".", ".."):
            raise StoreError(f"invalid task id {task_id!r}")
        return self.root / "tasks" / task_id

    def _path(self, task_id: str, name: str) -> Path:
        p = (self._task_dir(task_id) / name).resolve()
        if not str(p).startswith(str(self._task_dir(task_id).resolve())):
            raise StoreError(f"invalid store name {name!r}")
        return p

    def list_tasks(self) -> list[str]:
        base = self.root / "tasks"
        return sorted(p.name for p in base.iterdir() if p.is_dir())

    def put_json(self, task_id: str, name: str, obj) -> None:
        path = self._path(task_id, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(canonical_json(obj))
        tmp.replace(path)

    def get_json(self, task_id: str, name: str):
        path = self._path(task_id, name)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_bytes())
        except (json.JSONDecodeError, OSError) as exc:
            raise StoreError(f"corrupt document {name} for task {task_id}: {exc}") from exc

    def get_raw(self, task_id: str, name: str) -> bytes | None:
        path = self._path(task_id, name)
        return path.read_bytes() if path.exists() else None

    def put_blob(self, task_id: str, name: str, data: bytes) -> None:
        path = self._path(task_id, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)

    def get_blob(self, task_id: str, name: str) -> bytes:
        path = self._path(task_id, name)
        if not path.exists():
            raise StoreError(f"missing blob {name} for task {task_id}")
        return path.read_bytes()

    def append_jsonl(self, task_id: str, name: str, obj) -> None:
        path = self._path(task_id, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("ab") as fh:
            fh.write(json.dumps(obj, sort_keys=True).encode("utf-8") + b"\n")

    def read_jsonl(self, task_id: str, name: str) -> list:
        path = self._path(task_id, name)
        if not path.exists():
            return []
        out = []
        for line in path.read_bytes().splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out
