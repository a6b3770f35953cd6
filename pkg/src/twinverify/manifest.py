"""Dataset manifest: identities, images, twin pairing, and CSV round-trip.

CSV schema (header required)::

    image_id,identity_id,twin_identity_id,split,path

An empty ``twin_identity_id`` means the identity has no twin.  The twin
relation must be symmetric and irreflexive, and image ids unique.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

CSV_HEADER = ["image_id", "identity_id", "twin_identity_id", "split", "path"]


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    identity_id: str
    twin_identity_id: str | None
    split: str            # "train" or "test"
    path: str


class ManifestError(ValueError):
    pass


class TwinManifest:
    """Immutable view over manifest entries with validated twin structure."""

    def __init__(self, entries: list[ManifestEntry]):
        if not entries:
            raise ManifestError("manifest is empty")
        self.entries = list(entries)
        self._validate()
        self.twin_of: dict[str, str] = {}
        for e in self.entries:
            if e.twin_identity_id:
                self.twin_of[e.identity_id] = e.twin_identity_id

    def _validate(self) -> None:
        seen: set[str] = set()
        claimed: dict[str, str | None] = {}
        for e in self.entries:
            if e.image_id in seen:
                raise ManifestError(f"duplicate image id {e.image_id!r}")
            seen.add(e.image_id)
            if e.split not in ("train", "test"):
                raise ManifestError(f"bad split {e.split!r} for {e.image_id!r}")
            if e.twin_identity_id == e.identity_id:
                raise ManifestError(f"identity {e.identity_id!r} is its own twin")
            prev = claimed.get(e.identity_id, e.twin_identity_id)
            if prev != e.twin_identity_id:
                raise ManifestError(
                    f"identity {e.identity_id!r} has conflicting twin ids"
                )
            claimed[e.identity_id] = e.twin_identity_id
        for ident, twin in claimed.items():
            if twin is None:
                continue
            if claimed.get(twin, "missing") != ident:
                raise ManifestError(
                    f"twin relation not symmetric: {ident!r} -> {twin!r}"
                )

    # -- views ---------------------------------------------------------------

    def subset(self, split: str) -> "TwinManifest":
        picked = [e for e in self.entries if e.split == split]
        if not picked:
            raise ManifestError(f"no entries with split {split!r}")
        return TwinManifest(picked)

    def identities(self) -> list[str]:
        return sorted({e.identity_id for e in self.entries})

    def identity_index(self) -> dict[str, int]:
        return {ident: i for i, ident in enumerate(self.identities())}

    def images_of(self, identity_id: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.identity_id == identity_id]

    def twin_identities(self) -> list[str]:
        return sorted(i for i in self.identities() if i in self.twin_of)

    def twinless_identities(self) -> list[str]:
        return sorted(i for i in self.identities() if i not in self.twin_of)

    def twin_families(self) -> list[tuple[str, str]]:
        """Each twin pair once, lexicographically ordered within the pair."""
        return sorted(
            {tuple(sorted((a, b))) for a, b in self.twin_of.items()}
        )

    def entry(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)


def write_manifest(manifest: TwinManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for e in manifest.entries:
            writer.writerow(
                [e.image_id, e.identity_id, e.twin_identity_id or "", e.split, e.path]
            )


def read_manifest(path: str | Path) -> TwinManifest:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ManifestError(f"bad manifest header {header!r}, want {CSV_HEADER}")
        entries = [
            ManifestEntry(row[0], row[1], row[2] or None, row[3], row[4])
            for row in reader
            if row
        ]
    return TwinManifest(entries)
