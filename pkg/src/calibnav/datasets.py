"""ETH/UCY-style annotation logs, trajectory windows, splits and planning scenarios.

Annotation files hold whitespace-separated rows ``frame_id ped_id x y`` with
positions in meters. Frame ids may use a stride of 1 or 10; the stride is
detected from the data and frames are re-indexed to consecutive integers
(``index = (frame_id - offset) / stride``). Windows and scenarios refer to those
indices.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .predictor import OBS_LEN, PRED_LEN, TrajectoryWindow

FPS = 2.5
WINDOW_LEN = OBS_LEN + PRED_LEN
SCENARIO_FRAMES = 40  # 16 s
SCENARIO_SKIP = 20  # 8 s between scenario starts
HISTORY_FRAMES = OBS_LEN - 1
MIN_RECT_AREA = 1.0
INFLATED_SIDE = 4.0
VARIANTS = ("bottom_top", "right_left", "bl_tr", "br_tl")
CACHE_FORMAT = "calibnav-cache"
CACHE_VERSION = 1
SCENARIO_FORMAT = "calibnav-scenarios"


class LogParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = ""):
        where = f"{source}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.source = source


@dataclass
class SceneLog:
    scene_id: str
    frames: dict  # frame index -> list of (ped_id, x, y), sorted by ped_id
    frame_stride: int = 1
    frame_offset: int = 0
    fps: float = FPS

    def rows(self) -> list[tuple[int, int, float, float]]:
        """Rows with the original frame ids, ordered by (frame, ped)."""
        out = []
        for idx in sorted(self.frames):
            fid = self.frame_offset + idx * self.frame_stride
            for pid, x, y in self.frames[idx]:
                out.append((fid, pid, x, y))
        return out

    def tracks(self) -> dict[int, np.ndarray]:
        """``ped_id -> (n, 3)`` array of ``(frame index, x, y)`` sorted by frame."""
        acc: dict[int, list] = {}
        for idx in sorted(self.frames):
            for pid, x, y in self.frames[idx]:
                acc.setdefault(pid, []).append((idx, x, y))
        return {pid: np.array(v, dtype=float) for pid, v in sorted(acc.items())}

    @property
    def frame_range(self) -> tuple[int, int]:
        if not self.frames:
            return (0, -1)
        return (min(self.frames), max(self.frames))

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "frame_stride": self.frame_stride,
            "frame_offset": self.frame_offset,
            "rows": [list(r) for r in self.rows()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneLog":
        return build_log(d["scene_id"], [tuple(r) for r in d["rows"]], stride=d.get("frame_stride"))


def _to_int(tok: str) -> int:
    val = float(tok)
    if not math.isfinite(val) or val != int(val):
        raise ValueError(f"{tok!r} is not an integer id")
    return int(val)


def build_log(scene_id: str, rows: Sequence[tuple], stride: int | None = None) -> SceneLog:
    if not rows:
        return SceneLog(scene_id, {}, 1, 0)
    fids = sorted({int(r[0]) for r in rows})
    if stride is None:
        deltas = [b - a for a, b in zip(fids, fids[1:])]
        stride = reduce(math.gcd, deltas) if deltas else 1
    offset = fids[0]
    frames: dict[int, list] = {}
    for fid, pid, x, y in rows:
        idx, rem = divmod(int(fid) - offset, stride)
        if rem:
            raise LogParseError(f"frame {fid} is off the stride-{stride} grid")
        frames.setdefault(idx, []).append((int(pid), float(x), float(y)))
    for idx in frames:
        frames[idx].sort(key=lambda r: r[0])
    return SceneLog(scene_id, dict(sorted(frames.items())), stride, offset)


def parse_log(stream: Iterable[str], scene_id: str = "scene", source: str = "") -> SceneLog:
    """Read ``frame ped x y`` rows; ``#`` lines and blank lines are skipped."""
    rows = []
    seen = set()
    last_frame = None
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 4:
            raise LogParseError(f"expected 4 fields (frame ped x y), got {len(parts)}", lineno, source)
        try:
            fid, pid = _to_int(parts[0]), _to_int(parts[1])
            x, y = float(parts[2]), float(parts[3])
        except ValueError as exc:
            raise LogParseError(str(exc), lineno, source) from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise LogParseError("non-finite position", lineno, source)
        if last_frame is not None and fid < last_frame:
            raise LogParseError(f"frame {fid} after frame {last_frame}: frames must not decrease", lineno, source)
        if (fid, pid) in seen:
            raise LogParseError(f"duplicate row for pedestrian {pid} in frame {fid}", lineno, source)
        seen.add((fid, pid))
        last_frame = fid
        rows.append((fid, pid, x, y))
    try:
        return build_log(scene_id, rows)
    except LogParseError as exc:
        raise LogParseError(str(exc), None, source) from None


def load_log(path) -> SceneLog:
    path = Path(path)
    with path.open() as fh:
        return parse_log(fh, scene_id=path.stem, source=str(path))


def serialize_log(log: SceneLog) -> str:
    buf = io.StringIO()
    for fid, pid, x, y in log.rows():
        buf.write(f"{fid}\t{pid}\t{x!r}\t{y!r}\n")
    return buf.getvalue()


def _stretches(frame_idx: np.ndarray) -> list[tuple[int, int]]:
    """``(begin, end)`` row ranges of gap-free runs of frame indices."""
    if frame_idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(frame_idx) != 1) + 1
    bounds = np.concatenate([[0], breaks, [frame_idx.size]])
    return list(zip(bounds[:-1].tolist(), bounds[1:].tolist()))


def make_windows(log: SceneLog, stride: int = 1) -> list[TrajectoryWindow]:
    """Slide a 20-frame window over every gap-free stretch of every pedestrian."""
    if stride < 1:
        raise ValueError("window stride must be >= 1")
    out = []
    for pid, tr in log.tracks().items():
        fidx = tr[:, 0].astype(int)
        for a, b in _stretches(fidx):
            for s in range(a, b - WINDOW_LEN + 1, stride):
                seg = tr[s : s + WINDOW_LEN, 1:]
                out.append(TrajectoryWindow(pid, seg[:OBS_LEN], seg[OBS_LEN:], log.scene_id, int(fidx[s])))
    out.sort(key=lambda w: (w.scene_id, w.start_frame, w.ped_id))
    return out


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "in_distribution"
    train_fraction: float = 0.7
    holdout: tuple = ()

    def __post_init__(self):
        if self.mode not in ("in_distribution", "leave_one_out"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == "leave_one_out" and not self.holdout:
            raise ValueError("leave_one_out needs at least one held-out scene")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")

    @classmethod
    def parse(cls, text: str, train_fraction: float = 0.7) -> "SplitSpec":
        """``in_dist`` or ``loo:<scene>[,<scene>...]``."""
        if text in ("in_dist", "in_distribution"):
            return cls("in_distribution", train_fraction)
        if text.startswith("loo:"):
            names = tuple(n for n in text[4:].split(",") if n)
            return cls("leave_one_out", train_fraction, names)
        raise ValueError(f"cannot parse split {text!r}; use in_dist or loo:<scene>")


def scene_matches(scene_id: str, names: Sequence[str]) -> bool:
    sid = scene_id.lower()
    return any(sid == n.lower() or sid.startswith(n.lower()) for n in names)


def cut_frames(windows: Sequence[TrajectoryWindow], fraction: float = 0.7) -> dict[str, int]:
    """Per scene, the first start frame that belongs to the test portion."""
    starts: dict[str, list[int]] = {}
    for w in windows:
        starts.setdefault(w.scene_id, []).append(w.start_frame)
    cuts = {}
    for sid, s in starts.items():
        s.sort()
        n_train = int(math.floor(fraction * len(s) + 1e-9))
        cuts[sid] = s[n_train] if n_train < len(s) else s[-1] + 1
    return cuts


def split(windows: Sequence[TrajectoryWindow], spec: SplitSpec = SplitSpec()):
    if spec.mode == "leave_one_out":
        test = [w for w in windows if scene_matches(w.scene_id, spec.holdout)]
        train = [w for w in windows if not scene_matches(w.scene_id, spec.holdout)]
        return train, test
    cuts = cut_frames(windows, spec.train_fraction)
    train = [w for w in windows if w.start_frame < cuts[w.scene_id]]
    test = [w for w in windows if w.start_frame >= cuts[w.scene_id]]
    return train, test


def holdout_frame_range(log: SceneLog, windows: Sequence[TrajectoryWindow], spec: SplitSpec = SplitSpec()):
    """Frame-index range ``[first, last]`` of the scene's test portion."""
    first, last = log.frame_range
    if spec.mode == "leave_one_out":
        return (first, last) if scene_matches(log.scene_id, spec.holdout) else None
    own = [w for w in windows if w.scene_id == log.scene_id]
    if not own:
        return None
    return (cut_frames(own, spec.train_fraction)[log.scene_id], last)


# -- planning scenarios ------------------------------------------------------


@dataclass
class Scenario:
    scene_id: str
    start_frame: int
    variant: str
    rect: tuple  # (xmin, ymin, xmax, ymax)
    start: tuple
    goal: tuple
    peds: dict = field(default_factory=dict)  # ped_id -> (n, 3) rows of (frame - start_frame, x, y)
    n_frames: int = SCENARIO_FRAMES

    def __post_init__(self):
        self.peds = {int(k): np.asarray(v, dtype=float).reshape(-1, 3) for k, v in self.peds.items()}
        if np.allclose(self.start, self.goal):
            raise ValueError("scenario start and goal coincide")

    @property
    def scenario_id(self) -> str:
        return f"{self.scene_id}:{self.start_frame}:{self.variant}"

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "start_frame": self.start_frame,
            "variant": self.variant,
            "rect": list(self.rect),
            "start": list(self.start),
            "goal": list(self.goal),
            "n_frames": self.n_frames,
            "peds": {str(k): v.tolist() for k, v in sorted(self.peds.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            d["scene_id"],
            int(d["start_frame"]),
            d["variant"],
            tuple(d["rect"]),
            tuple(d["start"]),
            tuple(d["goal"]),
            {int(k): v for k, v in d["peds"].items()},
            int(d.get("n_frames", SCENARIO_FRAMES)),
        )


def start_goal(rect, variant: str) -> tuple[tuple, tuple]:
    xmin, ymin, xmax, ymax = rect
    cx, cy = 0.5 * (xmin + xmax), 0.5 * (ymin + ymax)
    if variant == "bottom_top":
        return (cx, ymin), (cx, ymax)
    if variant == "right_left":
        return (xmax, cy), (xmin, cy)
    if variant == "bl_tr":
        return (xmin, ymin), (xmax, ymax)
    if variant == "br_tl":
        return (xmax, ymin), (xmin, ymax)
    raise ValueError(f"unknown start-goal variant {variant!r}")


def workspace_rect(points: np.ndarray) -> tuple:
    lo, hi = points.min(axis=0), points.max(axis=0)
    if (hi[0] - lo[0]) * (hi[1] - lo[1]) < MIN_RECT_AREA:
        c = points.mean(axis=0)
        h = 0.5 * INFLATED_SIDE
        return (float(c[0] - h), float(c[1] - h), float(c[0] + h), float(c[1] + h))
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def extract_scenarios(
    log: SceneLog,
    frame_range: tuple[int, int] | None = None,
    length: int = SCENARIO_FRAMES,
    skip: int = SCENARIO_SKIP,
) -> list[Scenario]:
    """Cut ``length``-frame scenarios every ``skip`` frames, four start-goal variants each.

    Pedestrian rows include up to 7 frames of history before the scenario start
    so predictors have a full observation window at the first planning step.
    """
    if frame_range is None:
        frame_range = log.frame_range
    first, last = frame_range
    tracks = log.tracks()
    out = []
    s = first
    while s + length - 1 <= last:
        inside = []
        peds = {}
        for pid, tr in tracks.items():
            keep = (tr[:, 0] >= s - HISTORY_FRAMES) & (tr[:, 0] < s + length)
            if not np.any((tr[:, 0] >= s) & (tr[:, 0] < s + length)):
                continue
            rows = tr[keep].copy()
            rows[:, 0] -= s
            peds[pid] = rows
            inside.append(rows[rows[:, 0] >= 0, 1:])
        if inside:
            rect = workspace_rect(np.concatenate(inside))
            for variant in VARIANTS:
                a, b = start_goal(rect, variant)
                out.append(Scenario(log.scene_id, s, variant, rect, a, b, peds, length))
        s += skip
    return out


# -- cache and table export --------------------------------------------------


def write_cache(path, logs: Sequence[SceneLog], windows, scenarios, seed: int, meta: dict | None = None) -> None:
    doc = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "seed": seed,
        "meta": meta or {},
        "scenes": [log.to_dict() for log in logs],
        "windows": [w.to_dict() for w in windows],
        "scenarios": [s.to_dict() for s in scenarios],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def read_cache(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CACHE_FORMAT or doc.get("version") != CACHE_VERSION:
        raise ValueError(f"{path} is not a version-{CACHE_VERSION} {CACHE_FORMAT} file")
    return {
        "seed": doc["seed"],
        "meta": doc.get("meta", {}),
        "scenes": [SceneLog.from_dict(d) for d in doc["scenes"]],
        "windows": [TrajectoryWindow.from_dict(d) for d in doc["windows"]],
        "scenarios": [Scenario.from_dict(d) for d in doc["scenarios"]],
    }


def write_scenarios(path, scenarios: Sequence[Scenario], seed: int, source: str = "") -> None:
    doc = {
        "format": SCENARIO_FORMAT,
        "version": CACHE_VERSION,
        "seed": seed,
        "source": source,
        "scenarios": [s.to_dict() for s in scenarios],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def read_scenarios(path) -> list[Scenario]:
    """Scenarios from either a scenario file or a full cache."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") not in (SCENARIO_FORMAT, CACHE_FORMAT) or doc.get("version") != CACHE_VERSION:
        raise ValueError(f"{path} holds neither scenarios nor a cache")
    return [Scenario.from_dict(d) for d in doc["scenarios"]]


def window_columns() -> list[str]:
    cols = ["scene_id", "ped_id", "start_frame"]
    cols += [f"obs_{a}{k}" for k in range(OBS_LEN) for a in "xy"]
    cols += [f"fut_{a}{k}" for k in range(PRED_LEN) for a in "xy"]
    return cols


def windows_to_csv(windows: Sequence[TrajectoryWindow], fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(window_columns())
    for w in windows:
        writer.writerow([w.scene_id, w.ped_id, w.start_frame, *w.obs.ravel().tolist(), *w.future.ravel().tolist()])
