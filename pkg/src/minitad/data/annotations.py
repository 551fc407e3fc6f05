"""Annotation database and its JSON serialization.

The on-disk format is the ActivityNet-style layout used by most public
temporal detection datasets::

    {
      "version": "...",
      "database": {
        "<video_id>": {
          "duration": 120.5,
          "subset": "training",
          "annotations": [{"segment": [12.3, 45.6], "label": "run"}, ...]
        },
        ...
      }
    }

Segment endpoints are seconds. Loading clamps segments to [0, duration] and
drops anything left with zero length, counting the drops; malformed entries
raise :class:`AnnotationFormatError` carrying a JSON-pointer-style location.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Iterable

from minitad.core import ActionInstance, LabelSpace, TimeInterval, VideoRecord

logger = logging.getLogger(__name__)


class AnnotationFormatError(ValueError):
    """Malformed annotation JSON; ``pointer`` locates the offending node."""

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}")


@dataclasses.dataclass(slots=True)
class AnnotationDatabase:
    """All video records of a dataset plus the label space they share.

    ``num_dropped`` counts zero-length annotations removed during loading.
    """

    label_space: LabelSpace
    videos: dict[str, VideoRecord]
    num_dropped: int = 0

    def __len__(self) -> int:
        return len(self.videos)

    def __getitem__(self, video_id: str) -> VideoRecord:
        return self.videos[video_id]

    def __contains__(self, video_id: str) -> bool:
        return video_id in self.videos

    @property
    def video_ids(self) -> list[str]:
        return list(self.videos.keys())

    def subset(self, name: str) -> list[VideoRecord]:
        return [v for v in self.videos.values() if v.subset == name]

    def subset_names(self) -> list[str]:
        seen: dict[str, None] = {}
        for v in self.videos.values():
            seen.setdefault(v.subset, None)
        return list(seen)


def _require(cond: bool, pointer: str, message: str) -> None:
    if not cond:
        raise AnnotationFormatError(pointer, message)


def load_annotations(path: str | Path,
                     label_space: LabelSpace | None = None,
                     binary: bool = False) -> AnnotationDatabase:
    """Parse an annotation JSON file into an :class:`AnnotationDatabase`.

    When ``label_space`` is omitted, one is derived from the sorted set of
    labels present in the file. When given, any video using a label outside
    it aborts the load with a list of the offending video ids.
    """
    path = Path(path)
    with path.open() as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise AnnotationFormatError("/", f"not valid JSON: {exc}") from None

    _require(isinstance(raw, dict), "/", "top level must be an object")
    _require("database" in raw, "/database", "missing key")
    db = raw["database"]
    _require(isinstance(db, dict), "/database", "must be an object")

    if label_space is None:
        names = set()
        for vid, entry in db.items():
            for ann in entry.get("annotations", []) if isinstance(entry, dict) else []:
                if isinstance(ann, dict) and isinstance(ann.get("label"), str):
                    names.add(ann["label"])
        label_space = LabelSpace.from_names(names, binary=binary)
    else:
        known = set(label_space.class_names)
        offenders = []
        for vid, entry in db.items():
            if not isinstance(entry, dict):
                continue
            labels = {a.get("label") for a in entry.get("annotations", [])
                      if isinstance(a, dict)}
            if labels - known:
                offenders.append(vid)
        if offenders:
            raise AnnotationFormatError(
                "/database",
                f"labels outside the provided label space in videos: {sorted(offenders)}",
            )

    videos: dict[str, VideoRecord] = {}
    dropped = 0
    for vid, entry in db.items():
        ptr = f"/database/{vid}"
        _require(isinstance(entry, dict), ptr, "must be an object")
        _require("duration" in entry, f"{ptr}/duration", "missing key")
        duration = entry["duration"]
        _require(isinstance(duration, (int, float)) and duration > 0,
                 f"{ptr}/duration", f"must be a positive number, got {duration!r}")
        subset = entry.get("subset", "training")
        _require(isinstance(subset, str) and subset,
                 f"{ptr}/subset", "must be a non-empty string")

        instances = []
        anns = entry.get("annotations", [])
        _require(isinstance(anns, list), f"{ptr}/annotations", "must be a list")
        for i, ann in enumerate(anns):
            aptr = f"{ptr}/annotations/{i}"
            _require(isinstance(ann, dict), aptr, "must be an object")
            seg = ann.get("segment")
            _require(isinstance(seg, (list, tuple)) and len(seg) == 2,
                     f"{aptr}/segment", "must be a [start, end] pair")
            s, e = seg
            _require(all(isinstance(x, (int, float)) for x in (s, e)),
                     f"{aptr}/segment", "endpoints must be numbers")
            _require(e >= s, f"{aptr}/segment", f"end {e} precedes start {s}")
            label = ann.get("label")
            _require(isinstance(label, str), f"{aptr}/label", "must be a string")
            s = min(max(float(s), 0.0), float(duration))
            e = min(max(float(e), 0.0), float(duration))
            if e - s <= 0:
                dropped += 1
                continue
            instances.append(ActionInstance(TimeInterval(s, e),
                                            label_space.encode(label)))
        videos[vid] = VideoRecord(vid, float(duration), subset, tuple(instances))

    if dropped:
        logger.warning("%s: dropped %d zero-length annotations after clamping",
                       path.name, dropped)
    return AnnotationDatabase(label_space, videos, num_dropped=dropped)


def save_annotations(db: AnnotationDatabase, path: str | Path,
                     version: str = "minitad-1.0") -> None:
    """Write a database back to the JSON layout accepted by load_annotations."""
    payload = {"version": version, "database": {}}
    for vid, rec in db.videos.items():
        payload["database"][vid] = {
            "duration": rec.duration,
            "subset": rec.subset,
            "annotations": [
                {
                    "segment": [inst.interval.start, inst.interval.end],
                    "label": db.label_space.decode(inst.label),
                }
                for inst in rec.instances
            ],
        }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(payload, fh, indent=2)


def build_database(records: Iterable[VideoRecord],
                   label_space: LabelSpace) -> AnnotationDatabase:
    return AnnotationDatabase(label_space, {r.video_id: r for r in records})
