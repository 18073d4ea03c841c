"""Clip manifests: CSV with header ``path,keyword,language``."""

from __future__ import annotations

import csv
import io
import os
from collections.abc import Iterable
from dataclasses import dataclass

HEADER = ["path", "keyword", "language"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    path: str
    keyword: str
    language: str

    @property
    def key(self) -> tuple[str, str]:
        """Class identity: the same word in two languages is two classes."""
        return (self.language, self.keyword)


class Manifest:
    """Immutable list of entries with a class index keyed by (language, keyword)."""

    def __init__(self, entries: Iterable[Entry] = (), root: str = ""):
        self.root = root
        self.entries: tuple[Entry, ...] = tuple(entries)
        seen = set()
        index: dict[tuple[str, str], list[Entry]] = {}
        for e in self.entries:
            if e.path in seen:
                raise ManifestError(f"duplicate clip path: {e.path}")
            if not e.keyword:
                raise ManifestError(f"empty keyword for clip {e.path}")
            seen.add(e.path)
            index.setdefault(e.key, []).append(e)
        self.index = {k: tuple(v) for k, v in index.items()}

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.entries == other.entries

    def classes(self) -> list[tuple[str, str]]:
        """Class keys in sorted order, so downstream shuffles are reproducible."""
        return sorted(self.index)

    def languages(self) -> list[str]:
        return sorted({e.language for e in self.entries})

    def subset(self, keys) -> Manifest:
        keys = set(keys)
        return Manifest((e for e in self.entries if e.key in keys), self.root)

    def resolve(self, entry: Entry) -> str:
        """Filesystem path of a clip; relative paths are taken from ``root``."""
        if os.path.isabs(entry.path) or not self.root:
            return entry.path
        return os.path.join(self.root, entry.path)

    def absolute(self) -> Manifest:
        return Manifest(Entry(os.path.abspath(self.resolve(e)), e.keyword, e.language)
                        for e in self.entries)


def class_name(key: tuple[str, str]) -> str:
    language, keyword = key
    return f"{language}:{keyword}"


def parse_manifest(text: str, root: str = "") -> Manifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("missing header: expected path,keyword,language") from None
    if [h.strip() for h in header] != HEADER:
        raise ManifestError(f"missing header: expected path,keyword,language, got {header}")
    entries = []
    for row in reader:
        if not row:
            continue
        if len(row) != 3:
            raise ManifestError(f"malformed row at line {reader.line_num}: expected 3 fields, got {len(row)}")
        path, keyword, language = row
        if not path or not keyword or not language:
            raise ManifestError(f"malformed row at line {reader.line_num}: empty field")
        entries.append(Entry(path, keyword, language))
    return Manifest(entries, root)


def format_manifest(manifest: Manifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for e in manifest:
        w.writerow([e.path, e.keyword, e.language])
    return buf.getvalue()


def load_manifest(path) -> Manifest:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_manifest(fh.read(), os.path.dirname(os.path.abspath(path)))


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_manifest(manifest))
