"""File formats: protocols, trials, feature files, embedding stores, checkpoints.

Text formats are whitespace-delimited, one record per line, ``#`` starts
a comment. Binary formats are little-endian.

Embedding store::

    b"ISVEMB01" | u32 dim | u32 count |
    count x (u16 len, utf-8 utt id | u16 len, utf-8 speaker id | u8 bonafide | dim x f32)

Feature file::

    b"ISVFEAT1" | u32 frames | u32 bands | u32 sample_rate | u32 window | u32 hop |
    frames*bands x f32 (row-major)

Checkpoint::

    b"ISVCKPT1" | u32 header_len | header (utf-8 JSON) | tensor payload | u32 crc32
"""

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptionError, DimensionError, DuplicateIdError, FormatError, ParseError,
)
from .evaluation import BONAFIDE, SPOOF, TRIAL_TYPES, Trial
from .features import FeatureMatrix

CKPT_MAGIC = b"ISVCKPT1"
CKPT_VERSION = 1
EMB_MAGIC = b"ISVEMB01"
FEAT_MAGIC = b"ISVFEAT1"


def _data_lines(path):
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


@dataclass(frozen=True)
class ProtocolRecord:
    utt_id: str
    speaker_id: str
    spoof: str

    @property
    def bonafide(self):
        return self.spoof == BONAFIDE


def parse_protocol(path):
    """Read ``<utt_id> <speaker_id> <bonafide|replay>`` lines."""
    records, seen = [], {}
    for lineno, cols in _data_lines(path):
        if len(cols) != 3 or cols[2] not in (BONAFIDE, SPOOF):
            raise ParseError(f"{path}:{lineno}: expected '<utt> <speaker> bonafide|replay'")
        if cols[0] in seen:
            raise DuplicateIdError(
                f"{path}: duplicate utterance id {cols[0]!r} on lines {seen[cols[0]]} and {lineno}")
        seen[cols[0]] = lineno
        records.append(ProtocolRecord(*cols))
    return records


def write_protocol(records, path):
    lines = [f"{r.utt_id} {r.speaker_id} {r.spoof}" for r in records]
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


NATIVE_TRIAL_COLUMNS = {"enroll": 0, "test": 1, "type": 2}


def parse_column_mapping(spec):
    """``"enroll=0,test=1,type=3"`` -> dict (column indices)."""
    out = {}
    for part in spec.split(","):
        key, _, val = part.partition("=")
        out[key.strip()] = int(val)
    if set(out) != set(NATIVE_TRIAL_COLUMNS):
        raise ParseError(f"column mapping needs enroll, test and type, got {sorted(out)}")
    return out


def parse_token_mapping(spec):
    """``"target:target,nontarget:zero_effort,spoof:replay"`` -> dict."""
    out = {}
    for part in spec.split(","):
        src, _, dst = part.partition(":")
        if dst not in TRIAL_TYPES:
            raise ParseError(f"token mapping target {dst!r} is not a trial type")
        out[src] = dst
    return out


def parse_trials(path, columns=None, type_tokens=None):
    """Read a trial list.

    The native layout is ``<enroll_utt> <test_utt> <target|zero_effort|replay>``.
    ``columns`` maps enroll/test/type to column indices and ``type_tokens``
    maps foreign type tokens to trial types, for external layouts.
    """
    columns = columns or NATIVE_TRIAL_COLUMNS
    width = max(columns.values()) + 1
    trials = []
    for lineno, cols in _data_lines(path):
        if len(cols) < width:
            raise ParseError(f"{path}:{lineno}: expected at least {width} columns")
        tok = cols[columns["type"]]
        if type_tokens is not None:
            tok = type_tokens.get(tok, tok)
        if tok not in TRIAL_TYPES:
            raise ParseError(f"{path}:{lineno}: unknown trial type {tok!r}")
        trials.append(Trial(cols[columns["enroll"]], cols[columns["test"]], tok))
    return trials


def write_trials(trials, path):
    Path(path).write_text("".join(f"{t.enroll} {t.test} {t.type}\n" for t in trials),
                          encoding="utf-8")


def write_scores(mapping, path):
    """``<utt_id> <score>`` lines, full float precision."""
    Path(path).write_text("".join(f"{k} {float(v)!r}\n" for k, v in mapping.items()),
                          encoding="utf-8")


def read_scores(path):
    out = {}
    for lineno, cols in _data_lines(path):
        if len(cols) != 2:
            raise ParseError(f"{path}:{lineno}: expected '<utt> <score>'")
        try:
            out[cols[0]] = float(cols[1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad score {cols[1]!r}") from None
    return out


@dataclass
class EmbeddingStore:
    """Utterance id -> embedding plus speaker and spoof labels."""

    ids: list = field(default_factory=list)
    embeddings: np.ndarray = None
    speakers: list = field(default_factory=list)
    bonafide: np.ndarray = None

    def __post_init__(self):
        if self.embeddings is None:
            self.embeddings = np.zeros((0, 0), dtype=np.float32)
        self.embeddings = np.asarray(self.embeddings)
        if self.bonafide is None:
            self.bonafide = np.zeros(0, dtype=bool)
        self.bonafide = np.asarray(self.bonafide, dtype=bool)
        if len(set(self.ids)) != len(self.ids):
            raise DuplicateIdError("embedding store ids are not unique")
        if not (len(self.ids) == len(self.speakers) == len(self.bonafide) == len(self.embeddings)):
            raise DimensionError("embedding store fields differ in length")
        self._index = {u: i for i, u in enumerate(self.ids)}

    @classmethod
    def from_records(cls, records):
        """Build from ``(utt_id, embedding, speaker, bonafide)`` tuples; dims must agree."""
        records = list(records)
        dims = {len(np.ravel(r[1])) for r in records}
        if len(dims) > 1:
            raise DimensionError(f"mixed embedding dimensions {sorted(dims)}")
        if not records:
            return cls()
        return cls([r[0] for r in records],
                    np.stack([np.ravel(r[1]) for r in records]),
                    [r[2] for r in records],
                    np.array([bool(r[3]) for r in records]))

    @property
    def dim(self):
        return self.embeddings.shape[1] if len(self.ids) else 0

    def __len__(self):
        return len(self.ids)

    def __contains__(self, utt):
        return utt in self._index

    def __getitem__(self, utt):
        return self.embeddings[self._index[utt]]

    def subset(self, ids):
        idx = [self._index[u] for u in ids]
        return EmbeddingStore(list(ids), self.embeddings[idx],
                              [self.speakers[i] for i in idx], self.bonafide[idx])


def save_embedding_store(store, path):
    """Write a store; a list of records is validated (and rejected) before any bytes are written."""
    if not isinstance(store, EmbeddingStore):
        store = EmbeddingStore.from_records(store)
    emb = np.asarray(store.embeddings)
    if len(store) and emb.ndim != 2:
        raise DimensionError("embeddings must be a 2-D array")
    parts = [EMB_MAGIC, struct.pack("<II", store.dim, len(store))]
    for i, utt in enumerate(store.ids):
        for s in (utt, store.speakers[i]):
            b = s.encode("utf-8")
            parts.append(struct.pack("<H", len(b)) + b)
        parts.append(struct.pack("<B", int(bool(store.bonafide[i]))))
        parts.append(np.asarray(emb[i], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_embedding_store(path):
    buf = Path(path).read_bytes()
    if buf[:8] != EMB_MAGIC:
        raise FormatError(f"{path}: not an embedding store")
    try:
        dim, count = struct.unpack_from("<II", buf, 8)
        pos = 16
        ids, speakers, bona, rows = [], [], [], []
        for _ in range(count):
            strs = []
            for _ in range(2):
                (n,) = struct.unpack_from("<H", buf, pos)
                strs.append(buf[pos + 2:pos + 2 + n].decode("utf-8"))
                pos += 2 + n
            bona.append(bool(buf[pos]))
            pos += 1
            vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
            ids.append(strs[0])
            speakers.append(strs[1])
            rows.append(vec)
    except (struct.error, ValueError, IndexError) as exc:
        raise CorruptionError(f"{path}: truncated embedding store ({exc})") from None
    if pos != len(buf):
        raise CorruptionError(f"{path}: {len(buf) - pos} trailing bytes")
    emb = np.stack(rows).astype(np.float32) if rows else np.zeros((0, dim), dtype=np.float32)
    return EmbeddingStore(ids, emb, speakers, np.array(bona, dtype=bool))


def save_features(fm, path):
    data = np.asarray(fm.data, dtype="<f4")
    header = struct.pack("<5I", data.shape[0], data.shape[1], fm.sample_rate, fm.window, fm.hop)
    Path(path).write_bytes(FEAT_MAGIC + header + data.tobytes())


def load_features(path):
    buf = Path(path).read_bytes()
    if buf[:8] != FEAT_MAGIC:
        raise FormatError(f"{path}: not a feature file")
    if len(buf) < 28:
        raise CorruptionError(f"{path}: truncated header")
    frames, bands, sr, win, hop = struct.unpack_from("<5I", buf, 8)
    if len(buf) != 28 + 4 * frames * bands:
        raise CorruptionError(f"{path}: payload size mismatch")
    data = np.frombuffer(buf, dtype="<f4", offset=28).reshape(frames, bands).astype(np.float32)
    return FeatureMatrix(data, window=win, hop=hop, sample_rate=sr)


@dataclass
class ModelCheckpoint:
    architecture: dict
    tensors: dict
    optimizer: dict = field(default_factory=dict)
    optimizer_tensors: dict = field(default_factory=dict)
    seed: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt, path):
    """Serialize parameters and optimizer state; arrays keep their dtype bit for bit."""
    index, payload, offset = [], [], 0
    for group, arrays in (("param", ckpt.tensors), ("optim", ckpt.optimizer_tensors)):
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], order="C")
            dt = arr.dtype.newbyteorder("<")
            raw = arr.astype(dt, copy=False).tobytes()
            index.append({"group": group, "name": name, "dtype": dt.str,
                          "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            payload.append(raw)
            offset += len(raw)
    header = json.dumps({
        "format_version": CKPT_VERSION, "architecture": ckpt.architecture,
        "optimizer": ckpt.optimizer, "seed": ckpt.seed, "step": ckpt.step,
        "meta": ckpt.meta, "tensors": index,
    }, sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<I", len(header)) + header + b"".join(payload)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:8]!r}")
    if len(buf) < 16:
        raise CorruptionError(f"{path}: truncated checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"{path}: checksum mismatch (truncated or corrupted)")
    (hlen,) = struct.unpack_from("<I", body, 8)
    header = json.loads(body[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = 12 + hlen
    groups = {"param": {}, "optim": {}}
    for t in header["tensors"]:
        raw = body[base + t["offset"]:base + t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CorruptionError(f"{path}: tensor {t['name']} truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(tuple(t["shape"]))
        groups[t["group"]][t["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return ModelCheckpoint(header["architecture"], groups["param"], header["optimizer"],
                           groups["optim"], header["seed"], header["step"], header["meta"])
