"""Versioned hierarchical key-value store with watches and three-way merge.

Each host in the simulated cluster owns one in-memory Store. Paths are
slash-separated strings ("jitsu/vms/web/state"), values are flat strings.
Every mutation produces a Commit with a strictly increasing id, and watch
callbacks fire synchronously inside the mutating call, in registration
order, so a single-threaded simulation observes one total order of commits.

Cross-store synchronization is modeled as explicit remote writes (the
cluster layer adds delivery delay); merge3() implements the three-way
subtree merge used when replica state is pushed back to a first instance.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable


class StoreError(Exception):
    pass


class PermissionDenied(StoreError):
    pass


class MergeConflict(StoreError):
    pass


class InvalidPath(StoreError):
    pass


# Any identity; usable inside AccessScope member sets.
ANYONE = "*"


def check_path(path: str) -> str:
    """Validate a path: one or more non-empty segments joined by '/'."""
    if not path or path.startswith("/") or path.endswith("/"):
        raise InvalidPath(f"bad path: {path!r}")
    for seg in path.split("/"):
        if not seg:
            raise InvalidPath(f"bad path: {path!r}")
    return path


def _is_under(path: str, root: str) -> bool:
    return path == root or path.startswith(root + "/")


@dataclass(frozen=True)
class Commit:
    """One store mutation. Merge commits carry two parent ids."""

    id: int
    parents: tuple[int, ...]
    changed: tuple[str, ...]


@dataclass(frozen=True)
class WatchEvent:
    path: str
    value: str | None
    deleted: bool
    commit_id: int


@dataclass
class AccessScope:
    """Unix-like permissions for a subtree: who may read or write under it."""

    owner: str
    readable_by: set[str] = field(default_factory=set)
    writable_by: set[str] = field(default_factory=set)

    def may_write(self, identity: str) -> bool:
        return identity == self.owner or identity in self.writable_by or ANYONE in self.writable_by

    def may_read(self, identity: str) -> bool:
        # Write implies read.
        return self.may_write(identity) or identity in self.readable_by or ANYONE in self.readable_by


class WatchHandle:
    """Cancelable registration of a key or subtree watch."""

    _next_id = 0

    def __init__(self, store: "Store", target: str, mode: str,
                 callback: Callable[[WatchEvent], None]):
        self.id = WatchHandle._next_id
        WatchHandle._next_id += 1
        self.store = store
        self.target = target
        self.mode = mode  # "key" | "subtree"
        self.callback = callback
        self.active = True

    def cancel(self) -> None:
        self.active = False


# Versioned value: (value, commit id of last write).
VersionedValue = tuple[str, int]
Snapshot = dict[str, VersionedValue]


class Store:
    """One host's versioned store."""

    def __init__(self, owner: str, name: str = ""):
        self.owner = owner
        self.name = name or owner
        self._values: dict[str, str] = {}
        self._stamps: dict[str, int] = {}
        self._scopes: dict[str, AccessScope] = {}
        self._watches: list[WatchHandle] = []
        self._next_commit = 1
        self._head = 0
        self.commits: list[Commit] = []

    # -- Access control --

    def set_scope(self, root: str, scope: AccessScope) -> None:
        self._scopes[check_path(root)] = scope

    def drop_scope(self, root: str) -> None:
        self._scopes.pop(root, None)

    def _scope_for(self, path: str) -> AccessScope | None:
        # Longest configured prefix wins.
        best: AccessScope | None = None
        best_len = -1
        for root, scope in self._scopes.items():
            if _is_under(path, root) and len(root) > best_len:
                best, best_len = scope, len(root)
        return best

    def _check_write(self, identity: str, path: str) -> None:
        if identity == self.owner:
            return
        scope = self._scope_for(path)
        if scope is None or not scope.may_write(identity):
            raise PermissionDenied(f"{identity} may not write {path} on {self.name}")

    def _check_read(self, identity: str, path: str) -> None:
        if identity == self.owner:
            return
        scope = self._scope_for(path)
        if scope is None or not scope.may_read(identity):
            raise PermissionDenied(f"{identity} may not read {path} on {self.name}")

    # -- Read operations --

    def get(self, path: str, identity: str | None = None) -> str | None:
        check_path(path)
        if identity is not None:
            self._check_read(identity, path)
        return self._values.get(path)

    def list_subtree(self, root: str) -> list[str]:
        check_path(root)
        return sorted(p for p in self._values if _is_under(p, root))

    def snapshot(self, root: str) -> Snapshot:
        """Versioned view of every key at or under root."""
        check_path(root)
        return {p: (self._values[p], self._stamps[p])
                for p in sorted(self._values) if _is_under(p, root)}

    @property
    def head(self) -> int:
        return self._head

    # -- Write operations --

    def put(self, path: str, value: str, identity: str | None = None) -> Commit:
        check_path(path)
        if identity is not None:
            self._check_write(identity, path)
        return self._commit({path: value}, set())

    def put_many(self, items: dict[str, str], identity: str | None = None) -> Commit:
        """Atomically write several paths in one commit."""
        for path in items:
            check_path(path)
            if identity is not None:
                self._check_write(identity, path)
        return self._commit(dict(items), set())

    def remove_subtree(self, root: str, identity: str | None = None) -> Commit:
        """Delete root and all descendants; a no-op commit when absent."""
        check_path(root)
        doomed = [p for p in sorted(self._values) if _is_under(p, root)]
        if identity is not None:
            for p in doomed:
                self._check_write(identity, p)
        return self._commit({}, set(doomed), removed_root=root if doomed else None)

    def merge_put(self, path: str, value: str, identity: str | None = None,
                  merge: Callable[[str | None, str], str] | None = None,
                  source_commit: int | None = None) -> Commit:
        """Write value merged against the path's current content.

        Applied at delivery time, so a delayed remote write cannot clobber
        commits that landed after the sender took its snapshot. The default
        merge keeps the incoming value (plain last-writer).
        """
        check_path(path)
        if identity is not None:
            self._check_write(identity, path)
        merged = merge(self._values.get(path), value) if merge else value
        second = source_commit if source_commit is not None else self._head
        return self._commit({path: merged}, set(), merge_parent=second)

    def write_subtree(self, root: str, content: dict[str, str],
                      identity: str | None = None,
                      merge_parent: int | None = None) -> Commit:
        """Make the subtree under root equal exactly content (absolute paths)."""
        check_path(root)
        for p in content:
            check_path(p)
            if not _is_under(p, root):
                raise InvalidPath(f"{p} not under {root}")
        current = [p for p in self._values if _is_under(p, root)]
        doomed = set(p for p in current if p not in content)
        writes = {p: v for p, v in content.items()
                  if self._values.get(p) != v}
        if identity is not None:
            for p in sorted(doomed | set(writes)):
                self._check_write(identity, p)
        return self._commit(writes, doomed, merge_parent=merge_parent)

    def _commit(self, writes: dict[str, str], removals: set[str],
                removed_root: str | None = None,
                merge_parent: int | None = None) -> Commit:
        cid = self._next_commit
        self._next_commit += 1
        parents = (self._head,) if merge_parent is None else (self._head, merge_parent)
        changed = tuple(sorted(set(writes) | removals))
        commit = Commit(cid, parents, changed)
        for p in removals:
            self._values.pop(p, None)
            self._stamps.pop(p, None)
        for p, v in writes.items():
            self._values[p] = v
            self._stamps[p] = cid
        self._head = cid
        self.commits.append(commit)
        self._notify(commit, writes, removals, removed_root)
        return commit

    # -- Watches --

    def watch_key(self, path: str, callback: Callable[[WatchEvent], None]) -> WatchHandle:
        handle = WatchHandle(self, check_path(path), "key", callback)
        self._watches.append(handle)
        return handle

    def watch_subtree(self, root: str, callback: Callable[[WatchEvent], None]) -> WatchHandle:
        handle = WatchHandle(self, check_path(root), "subtree", callback)
        self._watches.append(handle)
        return handle

    def _notify(self, commit: Commit, writes: dict[str, str],
                removals: set[str], removed_root: str | None) -> None:
        if not commit.changed:
            return
        # Snapshot the list: callbacks may register or cancel watches.
        for handle in list(self._watches):
            if not handle.active:
                continue
            if handle.mode == "key":
                for path in commit.changed:
                    if path == handle.target:
                        deleted = path in removals
                        value = None if deleted else writes[path]
                        handle.callback(WatchEvent(path, value, deleted, commit.id))
            else:
                if removed_root is not None:
                    # Subtree removal: one deletion notification, not one per key.
                    if _is_under(removed_root, handle.target) or _is_under(handle.target, removed_root):
                        handle.callback(WatchEvent(removed_root, None, True, commit.id))
                    continue
                for path in commit.changed:
                    if _is_under(path, handle.target):
                        deleted = path in removals
                        value = None if deleted else writes[path]
                        handle.callback(WatchEvent(path, value, deleted, commit.id))
        self._watches = [h for h in self._watches if h.active]

    # -- Dump format --

    def dump(self) -> str:
        """One '<path>=<value>' line per key, sorted lexicographically."""
        return "".join(f"{p}={self._values[p]}\n" for p in sorted(self._values))

    def load(self, text: str) -> None:
        for line in text.splitlines():
            if not line:
                continue
            path, _, value = line.partition("=")
            self.put(check_path(path), value)


# -- Bracketed list values --
#
# Lists are stored as "[S(a); I(7)]": S() atoms are strings, I() atoms
# integers rendered in the producer's chosen notation. Atom text may not
# contain ")". The decoder tolerates a trailing separator because the
# canonical success response carries one.

_ATOM = re.compile(r"([SI])\(([^)]*)\)")


def encode_list(atoms: Iterable[tuple[str, str]]) -> str:
    parts = []
    for tag, text in atoms:
        if tag not in ("S", "I"):
            raise ValueError(f"bad atom tag {tag!r}")
        if ")" in text or ";" in text:
            raise ValueError(f"bad atom text {text!r}")
        parts.append(f"{tag}({text})")
    return "[" + "; ".join(parts) + "]"


def decode_list(value: str) -> list[tuple[str, str]]:
    """Parse a bracketed list; raises ValueError on malformed input."""
    if not (value.startswith("[") and value.endswith("]")):
        raise ValueError(f"not a list: {value!r}")
    body = value[1:-1]
    atoms = []
    pos = 0
    for m in _ATOM.finditer(body):
        between = body[pos:m.start()]
        if between.strip(" ;"):
            raise ValueError(f"malformed list: {value!r}")
        atoms.append((m.group(1), m.group(2)))
        pos = m.end()
    if body[pos:].strip(" ;"):
        raise ValueError(f"malformed list: {value!r}")
    return atoms


def entry_id(atom_text: str) -> str:
    """Dedup key for a log entry: the id field before the first '@'."""
    return atom_text.split("@", 1)[0]


def merge_logs(mine: str | None, theirs: str | None) -> str:
    """Order-preserving union of two bracketed logs, dedup by entry id."""
    left = decode_list(mine) if mine else []
    right = decode_list(theirs) if theirs else []
    seen: set[str] = set()
    merged = []
    for tag, text in left + right:
        if entry_id(text) not in seen:
            seen.add(entry_id(text))
            merged.append((tag, text))
    return encode_list(merged)


def default_is_log(path: str) -> bool:
    return path.rsplit("/", 1)[-1] == "log"


def merge3(mine: Snapshot, theirs: Snapshot, ancestor: Snapshot,
           is_log: Callable[[str], bool] = default_is_log) -> Snapshot:
    """Three-way merge of subtree snapshots rooted at the same path.

    Per key: a side that changed relative to the ancestor wins over one that
    did not; when both changed, log keys take the order-preserving union of
    entries and scalar keys take the writer with the higher commit stamp
    (value as deterministic tie-break). Deletion counts as a change.
    """
    result: Snapshot = {}
    for path in sorted(set(mine) | set(theirs) | set(ancestor)):
        m = mine.get(path)
        t = theirs.get(path)
        a = ancestor.get(path)
        m_val = m[0] if m else None
        t_val = t[0] if t else None
        a_val = a[0] if a else None
        if m_val == t_val:
            if m is not None:
                # Identical content; keep the higher stamp.
                result[path] = m if m[1] >= t[1] else t
            continue
        if m_val == a_val:
            if t is not None:
                result[path] = t
            continue
        if t_val == a_val:
            if m is not None:
                result[path] = m
            continue
        # Both sides changed to different content.
        if is_log(path):
            merged = merge_logs(m_val, t_val)
            result[path] = (merged, max(m[1] if m else 0, t[1] if t else 0))
        else:
            candidates = [vv for vv in (m, t) if vv is not None]
            result[path] = max(candidates, key=lambda vv: (vv[1], vv[0]))
    return result
