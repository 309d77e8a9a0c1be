"""Feature files, checkpoint containers, manifests and the synthetic generator.

Feature file (little-endian)::

    b"PRVF" | version u32 | rows u32 | cols u32 | rows*cols float32, row-major

Checkpoint container (little-endian), a list of named arrays::

    b"PRVC" | version u32 | n_sections u32 |
      per section: name_len u32 | name utf-8 | dtype u32 | ndim u32 | dims u32*ndim | payload

dtype codes: 0 float32, 1 float64, 2 int64, 3 uint8.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix64

FEATURE_MAGIC = b"PRVF"
CHECKPOINT_MAGIC = b"PRVC"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_DTYPE_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class FeatureFormatError(ValueError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class TruncatedFileError(FeatureFormatError):
    pass


class DimensionMismatchError(FeatureFormatError):
    pass


class ManifestError(ValueError):
    pass


# -- feature files ------------------------------------------------------------

def write_features(path, matrix) -> None:
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {m.shape}")
    payload = np.ascontiguousarray(m, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, m.shape[0], m.shape[1]))
        fh.write(payload.tobytes())


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    return _parse_features(raw, str(path))


def _parse_features(raw: bytes, where: str) -> np.ndarray:
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{where}: bad magic")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{where}: truncated header")
    _, version, rows, cols = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{where}: unsupported version {version}")
    expected = rows * cols * 4
    body = len(raw) - _HEADER.size
    if body < expected:
        raise TruncatedFileError(f"{where}: header says {rows}x{cols} but payload holds {body // 4} values")
    if body > expected:
        raise DimensionMismatchError(f"{where}: header says {rows}x{cols} but payload holds {body // 4} values")
    return np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=_HEADER.size).reshape(rows, cols).astype(np.float32)


# -- checkpoint container -----------------------------------------------------

def save_checkpoint(path, sections: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, FORMAT_VERSION, len(sections)))
        for name, arr in sections.items():
            a = np.asarray(arr)
            if a.dtype.kind == "f":
                a = a.astype("<f8" if a.dtype.itemsize == 8 else "<f4")
            elif a.dtype.kind in "iub" and a.dtype != np.uint8:
                a = a.astype("<i8")
            code = _DTYPE_CODES.get(a.dtype.str)
            if code is None:
                raise TypeError(f"checkpoint section {name!r}: unsupported dtype {a.dtype}")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<II", code, a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: truncated header")
    _, version, n = struct.unpack_from("<4sII", raw)
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    pos, out = 12, {}
    try:
        for _ in range(n):
            (klen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + klen].decode("utf-8")
            pos += klen
            code, ndim = struct.unpack_from("<II", raw, pos)
            pos += 8
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            nbytes = count * dt.itemsize
            if pos + nbytes > len(raw):
                raise TruncatedFileError(f"{path}: section {name!r} truncated")
            out[name] = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error:
        raise TruncatedFileError(f"{path}: truncated section header") from None
    if pos != len(raw):
        raise DimensionMismatchError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


# -- dataset types --------------------------------------------------------------

@dataclass
class VideoRecord:
    video_id: str
    frames: np.ndarray


@dataclass
class QueryRecord:
    query_id: str
    video_id: str
    words: np.ndarray
    teacher_eos: np.ndarray
    gt_span: tuple | None = None


@dataclass
class Dataset:
    videos: list
    queries: list
    split: str = "train"
    _by_id: dict = field(default=None, init=False, repr=False)

    @property
    def d_v(self) -> int:
        return self.videos[0].frames.shape[1]

    @property
    def d_q(self) -> int:
        return self.queries[0].words.shape[1]

    def video(self, video_id: str) -> VideoRecord:
        if self._by_id is None:
            self._by_id = {v.video_id: v for v in self.videos}
        return self._by_id[video_id]

    def video_index(self) -> dict:
        return {v.video_id: i for i, v in enumerate(self.videos)}

    def validate(self) -> "Dataset":
        problems = []
        if not self.videos:
            problems.append("no videos")
        if not self.queries:
            problems.append("no queries")
        ids = [v.video_id for v in self.videos]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            problems.append(f"duplicate video ids: {dupes}")
        known = set(ids)
        dangling = [q.query_id for q in self.queries if q.video_id not in known]
        if dangling:
            problems.append(f"queries reference missing videos: {dangling}")
        if self.videos:
            dv = self.videos[0].frames.shape[1]
            bad = [v.video_id for v in self.videos if v.frames.ndim != 2 or v.frames.shape[1] != dv or len(v.frames) < 1]
            if bad:
                problems.append(f"videos with inconsistent d_v (expected {dv}): {bad}")
            bad = [v.video_id for v in self.videos if not np.all(np.isfinite(v.frames))]
            if bad:
                problems.append(f"videos with non-finite frames: {bad}")
        if self.queries:
            dq = self.queries[0].words.shape[1]
            bad = [q.query_id for q in self.queries if q.words.ndim != 2 or q.words.shape[1] != dq]
            if bad:
                problems.append(f"queries with inconsistent d_q (expected {dq}): {bad}")
            bad = [q.query_id for q in self.queries if len(q.words) < 2]
            if bad:
                problems.append(f"queries shorter than 2 word rows: {bad}")
            dt = self.queries[0].teacher_eos.shape[-1]
            bad = [q.query_id for q in self.queries if q.teacher_eos.shape != (dt,)]
            if bad:
                problems.append(f"queries with inconsistent teacher dimension: {bad}")
        if problems:
            raise ManifestError("; ".join(problems))
        return self


# -- manifests --------------------------------------------------------------------

def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write feature files plus ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    videos, queries = [], []
    for v in dataset.videos:
        rel = f"videos/{v.video_id}.prvf"
        write_features(out / rel, v.frames)
        videos.append({"id": v.video_id, "feature_path": rel})
    for q in dataset.queries:
        rel = f"queries/{q.query_id}.prvf"
        rel_t = f"queries/{q.query_id}.eos.prvf"
        write_features(out / rel, q.words)
        write_features(out / rel_t, q.teacher_eos[None, :])
        entry = {"id": q.query_id, "video_id": q.video_id, "feature_path": rel, "teacher_eos_path": rel_t}
        if q.gt_span is not None:
            entry["gt_span"] = [int(q.gt_span[0]), int(q.gt_span[1])]
        queries.append(entry)
    meta = {"d_v": dataset.d_v, "d_q": dataset.d_q, "split": dataset.split}
    path = out / "manifest.json"
    path.write_text(json.dumps({"videos": videos, "queries": queries, "meta": meta}, indent=1) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    for key in ("videos", "queries", "meta"):
        if key not in doc:
            raise ManifestError(f"{path}: missing top-level key {key!r}")
    base = path.parent
    meta = doc["meta"]
    videos = [VideoRecord(v["id"], load_features(base / v["feature_path"])) for v in doc["videos"]]
    queries = []
    for q in doc["queries"]:
        eos = load_features(base / q["teacher_eos_path"])
        span = tuple(q["gt_span"]) if q.get("gt_span") is not None else None
        queries.append(QueryRecord(q["id"], q["video_id"], load_features(base / q["feature_path"]), eos.reshape(-1), span))
    ds = Dataset(videos, queries, split=meta.get("split", "train"))
    ds.validate()
    problems = []
    if "d_v" in meta and ds.d_v != meta["d_v"]:
        problems.append(f"meta.d_v={meta['d_v']} but features have {ds.d_v}")
    if "d_q" in meta and ds.d_q != meta["d_q"]:
        problems.append(f"meta.d_q={meta['d_q']} but features have {ds.d_q}")
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems))
    return ds


# -- synthetic generator ----------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 200
    frames_per_video: int = 64
    events_per_video: int | tuple = 4
    queries_per_video: int = 3
    d_v: int = 32
    d_q: int = 32
    noise_std: float = 0.1
    seed: int = 0
    words_per_query: int = 6
    split: str = "train"

    def validate(self) -> "SynthConfig":
        counts = [self.n_videos, self.frames_per_video, self.queries_per_video, self.d_v, self.d_q]
        lo, hi = self.event_range
        if min(counts + [lo]) < 1 or hi < lo:
            raise ValueError(f"invalid synthetic config: {self}")
        if self.words_per_query < 2:
            raise ValueError("words_per_query must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if hi > min(self.d_v, self.d_q):
            raise ValueError(
                f"dimension too small: {hi} events need {hi} orthogonal prototypes but d_v={self.d_v}, d_q={self.d_q}")
        if hi > self.frames_per_video:
            raise ValueError(f"{hi} events do not fit in {self.frames_per_video} frames")
        return self

    @property
    def event_range(self) -> tuple:
        e = self.events_per_video
        if isinstance(e, (tuple, list)):
            return int(e[0]), int(e[1])
        return int(e), int(e)


def _orthonormal(rng: SplitMix64, n: int, d: int) -> np.ndarray:
    g = rng.normal((n, d))
    out = np.zeros_like(g)
    for i in range(n):
        v = g[i] - out[:i].T @ (out[:i] @ g[i])
        out[i] = v / np.linalg.norm(v)
    return out


def _segment_lengths(rng: SplitMix64, total: int, n: int) -> np.ndarray:
    floor = max(1, total // (2 * n))
    extra = total - floor * n
    draws = rng.integers(0, n, size=(extra,)) if extra else np.zeros(0, dtype=np.int64)
    return floor + np.bincount(draws, minlength=n)


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    """Videos built from contiguous events; each query describes one event.

    Within a video, event prototypes are orthonormal. When ``d_v == d_q`` the
    video and text prototypes coincide, so raw frame features and teacher
    embeddings share one space.
    """
    cfg.validate()
    root = SplitMix64(cfg.seed)
    lo, hi = cfg.event_range
    videos, queries = [], []
    for v in range(cfg.n_videos):
        rng = root.spawn(v)
        n_events = lo if lo == hi else rng.integers(lo, hi + 1)
        text_protos = _orthonormal(rng, n_events, cfg.d_q)
        video_protos = text_protos if cfg.d_v == cfg.d_q else _orthonormal(rng, n_events, cfg.d_v)
        lengths = _segment_lengths(rng, cfg.frames_per_video, n_events)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        event_of_frame = np.repeat(np.arange(n_events), lengths)
        frames = video_protos[event_of_frame] + cfg.noise_std * rng.normal((cfg.frames_per_video, cfg.d_v))
        vid = f"v{v:05d}"
        videos.append(VideoRecord(vid, frames.astype(np.float32)))
        order = rng.permutation(n_events)
        for q in range(cfg.queries_per_video):
            e = int(order[q % n_events])
            words = text_protos[e] + cfg.noise_std * rng.normal((cfg.words_per_query, cfg.d_q))
            words = words.astype(np.float32)
            span = (int(starts[e]), int(starts[e] + lengths[e]))
            queries.append(QueryRecord(f"{vid}_q{q}", vid, words, words[-1].copy(), span))
    return Dataset(videos, queries, split=cfg.split).validate()


def synth_config_from_dict(d: dict) -> SynthConfig:
    d = dict(d)
    if isinstance(d.get("events_per_video"), list):
        d["events_per_video"] = tuple(d["events_per_video"])
    unknown = set(d) - set(SynthConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
    return SynthConfig(**d)

