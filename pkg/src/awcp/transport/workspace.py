"""Workspace file-set resolution, manifests, deterministic ZIP archives and snapshot application."""

from __future__ import annotations

import base64
import binascii
import glob
import hashlib
import io
import os
import shutil
import stat
import zipfile
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from typing import Iterable, Mapping

from ..protocol import AwcpError, EnvironmentDeclaration, ErrorCode

# 1980-01-01 is the earliest timestamp a ZIP entry can carry.
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
ZIP_COMPRESSLEVEL = 6


class IntegrityError(AwcpError):
    default_code = ErrorCode.INTEGRITY_MISMATCH


class UnsafePathError(AwcpError):
    default_code = ErrorCode.ADMISSION_DENIED


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def check_relative(rel: str) -> str:
    """Reject absolute paths and parent escapes; return the normalized posix form."""
    if not rel or "\\" in rel or rel.startswith("/") or "\x00" in rel:
        raise UnsafePathError(f"unsafe path {rel!r}")
    parts = [p for p in rel.split("/") if p not in ("", ".")]
    if not parts or ".." in parts:
        raise UnsafePathError(f"unsafe path {rel!r}")
    return "/".join(parts)


def _excluded(rel: str, patterns: Iterable[str]) -> bool:
    parts = rel.split("/")
    candidates = ["/".join(parts[:i]) for i in range(1, len(parts) + 1)]
    for pat in patterns:
        pat = pat.rstrip("/")
        if any(fnmatchcase(c, pat) for c in candidates):
            return True
        if pat.endswith("/**") and any(c == pat[:-3] for c in candidates):
            return True
    return False


def walk_files(root: str, ignore_dirs: Iterable[str] = ()) -> list[str]:
    """All regular files and symlinks under ``root`` as sorted posix relative paths."""
    ignore = set(ignore_dirs)
    out = []
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = os.path.relpath(dirpath, root)
        keep = []
        for d in dirnames:
            if d in ignore:
                continue
            if os.path.islink(os.path.join(dirpath, d)):
                filenames.append(d)
            else:
                keep.append(d)
        dirnames[:] = keep
        for name in filenames:
            rel = name if rel_dir == "." else f"{rel_dir}/{name}"
            out.append(rel.replace(os.sep, "/"))
    return sorted(out)


def resolve_environment(root: str, env: EnvironmentDeclaration) -> list[str]:
    """Resolve include/exclude patterns to the sorted list of projected paths."""
    root = os.path.realpath(root)
    if not os.path.isdir(root):
        raise AwcpError(f"workspace root {root} is not a readable directory", ErrorCode.ADMISSION_DENIED)
    selected: set[str] = set()
    for pattern in env.resources:
        if pattern.strip("/") in (".", ""):
            selected.update(walk_files(root))
            continue
        for hit in glob.glob(pattern, root_dir=root, recursive=True):
            hit = hit.replace(os.sep, "/").rstrip("/")
            full = os.path.join(root, hit)
            if os.path.isdir(full) and not os.path.islink(full):
                selected.update(f"{hit}/{p}" for p in walk_files(full))
            elif os.path.lexists(full):
                selected.add(hit)
    return sorted(check_relative(p) for p in selected if not _excluded(p, env.excludes))


@dataclass(frozen=True)
class ManifestEntry:
    relative_path: str
    byte_size: int
    content_hash: str

    def to_dict(self) -> dict:
        return {"relativePath": self.relative_path, "byteSize": self.byte_size, "contentHash": self.content_hash}


@dataclass(frozen=True)
class WorkspaceManifest:
    entries: tuple[ManifestEntry, ...] = ()

    def __post_init__(self):
        paths = [e.relative_path for e in self.entries]
        if paths != sorted(set(paths)):
            raise ValueError("manifest paths must be sorted and unique")
        for p in paths:
            check_relative(p)

    @property
    def total_bytes(self) -> int:
        return sum(e.byte_size for e in self.entries)

    @property
    def paths(self) -> list[str]:
        return [e.relative_path for e in self.entries]

    def by_path(self) -> dict[str, ManifestEntry]:
        return {e.relative_path: e for e in self.entries}

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries], "totalBytes": self.total_bytes}


def _read_entry(full: str) -> tuple[bool, bytes]:
    if os.path.islink(full):
        return True, os.readlink(full).encode("utf-8")
    with open(full, "rb") as f:
        return False, f.read()


def _entry_hash(is_link: bool, content: bytes) -> str:
    # symlinks hash their target with a marker so they never collide with a file
    return sha256_hex(b"symlink:" + content) if is_link else sha256_hex(content)


def build_manifest(root: str, paths: Iterable[str] | None = None, ignore_dirs: Iterable[str] = (".git",)) -> WorkspaceManifest:
    if paths is None:
        paths = walk_files(root, ignore_dirs)
    entries = []
    for rel in sorted(set(paths)):
        is_link, content = _read_entry(os.path.join(root, rel))
        entries.append(ManifestEntry(rel, len(content), _entry_hash(is_link, content)))
    return WorkspaceManifest(tuple(entries))


def manifest_from_entries(files: Mapping[str, tuple[bool, bytes]]) -> WorkspaceManifest:
    return WorkspaceManifest(
        tuple(ManifestEntry(p, len(c), _entry_hash(link, c)) for p, (link, c) in sorted(files.items()))
    )


# ---------------------------------------------------------------------------
# deterministic archives


def build_archive_from_entries(files: Mapping[str, tuple[bool, bytes]], executable: Iterable[str] = ()) -> bytes:
    """Build a ZIP whose bytes depend only on paths, contents and exec bits."""
    exec_set = set(executable)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED, compresslevel=ZIP_COMPRESSLEVEL) as zf:
        for rel in sorted(files):
            is_link, content = files[rel]
            info = zipfile.ZipInfo(check_relative(rel), date_time=ZIP_EPOCH)
            info.create_system = 3
            if is_link:
                info.external_attr = (stat.S_IFLNK | 0o777) << 16
                info.compress_type = zipfile.ZIP_STORED
            else:
                perm = 0o755 if rel in exec_set else 0o644
                info.external_attr = (stat.S_IFREG | perm) << 16
                info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, content, compresslevel=ZIP_COMPRESSLEVEL)
    return buf.getvalue()


def build_archive(root: str, paths: Iterable[str]) -> bytes:
    files, executable = {}, []
    for rel in paths:
        full = os.path.join(root, rel)
        files[rel] = _read_entry(full)
        if not files[rel][0] and os.stat(full).st_mode & stat.S_IXUSR:
            executable.append(rel)
    return build_archive_from_entries(files, executable)


def read_archive(data: bytes) -> tuple[dict[str, tuple[bool, bytes]], set[str]]:
    """Parse a ZIP into ``{path: (is_symlink, content)}`` plus the executable set."""
    files: dict[str, tuple[bool, bytes]] = {}
    executable: set[str] = set()
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            for info in zf.infolist():
                if info.is_dir():
                    continue
                rel = check_relative(info.filename)
                mode = info.external_attr >> 16
                is_link = stat.S_ISLNK(mode)
                files[rel] = (is_link, zf.read(info))
                if not is_link and mode & stat.S_IXUSR:
                    executable.add(rel)
    except (zipfile.BadZipFile, EOFError) as exc:
        raise IntegrityError(f"archive is not a valid ZIP: {exc}") from None
    return files, executable


def encode_b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def decode_verified(data_base64: str, expected_sha256: str) -> bytes:
    """Decode a base64 payload and check its digest before anything touches disk."""
    try:
        raw = base64.b64decode(data_base64, validate=True)
    except (binascii.Error, ValueError):
        raise IntegrityError("payload is not valid base64") from None
    # non-canonical encodings (flipped padding bits) decode silently; reject them
    if encode_b64(raw) != data_base64:
        raise IntegrityError("payload base64 is not canonical")
    verify_digest(raw, expected_sha256)
    return raw


def verify_digest(raw: bytes, expected_sha256: str) -> None:
    actual = sha256_hex(raw)
    if actual != expected_sha256:
        raise IntegrityError(f"sha256 mismatch: expected {expected_sha256}, got {actual}")


def _inside(root_real: str, path: str) -> bool:
    real = os.path.realpath(path)
    return real == root_real or real.startswith(root_real + os.sep)


def _link_target_ok(root_real: str, rel: str, target: str) -> bool:
    if os.path.isabs(target):
        return False
    resolved = os.path.normpath(os.path.join(root_real, os.path.dirname(rel), target))
    return resolved == root_real or resolved.startswith(root_real + os.sep)


def _write_entry(root_real: str, rel: str, is_link: bool, content: bytes, executable: bool) -> None:
    dest = os.path.join(root_real, rel)
    parent = os.path.dirname(dest)
    os.makedirs(parent, exist_ok=True)
    if not _inside(root_real, parent):
        raise UnsafePathError(f"{rel} would be written outside the workspace")
    if os.path.lexists(dest):
        if os.path.isdir(dest) and not os.path.islink(dest):
            raise UnsafePathError(f"{rel} is a directory locally")
        os.unlink(dest)
    if is_link:
        target = content.decode("utf-8")
        if not _link_target_ok(root_real, rel, target):
            raise UnsafePathError(f"symlink {rel} -> {target} escapes the workspace")
        os.symlink(target, dest)
        return
    with open(dest, "wb") as f:
        f.write(content)
    os.chmod(dest, 0o755 if executable else 0o644)


def extract_archive(data: bytes, dest: str) -> WorkspaceManifest:
    files, executable = read_archive(data)
    root_real = os.path.realpath(dest)
    for rel, (is_link, content) in sorted(files.items()):
        _write_entry(root_real, rel, is_link, content, rel in executable)
    return manifest_from_entries(files)


def set_read_only(root: str) -> None:
    """Strip write bits from a provisioned tree (files and directories)."""
    for dirpath, dirnames, filenames in os.walk(root, topdown=False):
        for name in filenames:
            p = os.path.join(dirpath, name)
            if not os.path.islink(p):
                os.chmod(p, stat.S_IMODE(os.stat(p).st_mode) & ~0o222)
        for name in dirnames:
            p = os.path.join(dirpath, name)
            if not os.path.islink(p):
                os.chmod(p, stat.S_IMODE(os.stat(p).st_mode) & ~0o222)
    os.chmod(root, stat.S_IMODE(os.stat(root).st_mode) & ~0o222)


def remove_tree(path: str) -> None:
    """rmtree that restores write permission first and never follows a top-level symlink."""
    if os.path.islink(path):
        os.unlink(path)
        return
    if not os.path.exists(path):
        return

    def _onerror(func, p, _exc):
        parent = os.path.dirname(p)
        os.chmod(parent, 0o755)
        if os.path.isdir(p) and not os.path.islink(p):
            os.chmod(p, 0o755)
        func(p)

    os.chmod(path, 0o755)
    for dirpath, dirnames, _ in os.walk(path):
        for d in dirnames:
            p = os.path.join(dirpath, d)
            if not os.path.islink(p):
                os.chmod(p, 0o755)
    shutil.rmtree(path, onerror=_onerror)


# ---------------------------------------------------------------------------
# snapshot application


@dataclass
class ChangeSummary:
    added: list[str] = field(default_factory=list)
    modified: list[str] = field(default_factory=list)
    deleted: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.added or self.modified or self.deleted)

    def to_dict(self) -> dict:
        return {"added": self.added, "modified": self.modified, "deleted": self.deleted}

    @classmethod
    def from_dict(cls, d: dict) -> "ChangeSummary":
        return cls(list(d.get("added", [])), list(d.get("modified", [])), list(d.get("deleted", [])))


def _prune_empty_parents(root_real: str, rel: str) -> None:
    parent = os.path.dirname(rel)
    while parent:
        full = os.path.join(root_real, parent)
        try:
            os.rmdir(full)
        except OSError:
            return
        parent = os.path.dirname(parent)


def apply_archive(root: str, data: bytes, scope: Iterable[str]) -> ChangeSummary:
    """Make ``root`` match the archive for every path in ``scope`` plus any path the archive carries.

    Paths outside ``scope`` are never deleted, so an executor cannot remove
    files the delegator did not project.
    """
    files, executable = read_archive(data)
    root_real = os.path.realpath(root)
    summary = ChangeSummary()
    for rel, (is_link, content) in sorted(files.items()):
        dest = os.path.join(root_real, rel)
        if os.path.lexists(dest) and not (os.path.isdir(dest) and not os.path.islink(dest)):
            cur_link, cur = _read_entry(dest)
            cur_exec = not cur_link and bool(os.stat(dest).st_mode & stat.S_IXUSR)
            if (cur_link, cur) == (is_link, content) and (is_link or cur_exec == (rel in executable)):
                continue
            summary.modified.append(rel)
        else:
            summary.added.append(rel)
        _write_entry(root_real, rel, is_link, content, rel in executable)
    for rel in sorted(set(scope)):
        rel = check_relative(rel)
        if rel in files:
            continue
        dest = os.path.join(root_real, rel)
        if os.path.lexists(dest) and not (os.path.isdir(dest) and not os.path.islink(dest)):
            if not _inside(root_real, os.path.dirname(dest)):
                continue
            os.unlink(dest)
            summary.deleted.append(rel)
            _prune_empty_parents(root_real, rel)
    return summary
