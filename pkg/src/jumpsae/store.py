"""Activation shards: collection, bucket shuffling and batch streaming.

Shard layout (little-endian)::

    magic "ASHD" | version u32 | site u8 | layer u16 | n u32 | rows u64 |
    tag_len u16 | corpus_tag utf-8 | rows*n float32

Every shard holds at least one row.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"ASHD"
VERSION = 1
SITES = ("attn_out_pre_wo", "mlp_out_post_norm", "resid_post_mlp", "mlp_in_post_norm")
DEFAULT_SHARD_BYTES = 64 << 20
DEFAULT_BUCKET_SIZE = 1_000_000

_FIXED = struct.Struct("<4sIBHIQH")


class ShardFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path} @ byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class SiteSpec:
    site: str
    layer: int

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"unknown site {self.site!r}; expected one of {', '.join(SITES)}")
        if self.layer < 0:
            raise ValueError("layer index must be non-negative")

    @property
    def tag(self) -> int:
        return SITES.index(self.site)


@dataclass(frozen=True)
class ShardHeader:
    site: str
    layer: int
    n: int
    row_count: int
    corpus_tag: str
    data_offset: int

    @property
    def site_spec(self) -> SiteSpec:
        return SiteSpec(self.site, self.layer)


def encode_header(site_spec: SiteSpec, n: int, row_count: int, corpus_tag: str = "") -> bytes:
    tag = corpus_tag.encode("utf-8")
    return _FIXED.pack(MAGIC, VERSION, site_spec.tag, site_spec.layer, n, row_count, len(tag)) + tag


def read_header(path) -> ShardHeader:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        fixed = fh.read(_FIXED.size)
        if len(fixed) < _FIXED.size:
            raise ShardFormatError(path, len(fixed), f"truncated header ({len(fixed)} of {_FIXED.size} bytes)")
        magic, version, site, layer, n, rows, tag_len = _FIXED.unpack(fixed)
        if magic != MAGIC:
            raise ShardFormatError(path, 0, f"bad magic {magic!r}")
        if version != VERSION:
            raise ShardFormatError(path, 4, f"unsupported version {version}")
        if site >= len(SITES):
            raise ShardFormatError(path, 8, f"unknown site tag {site}")
        if n == 0 or rows == 0:
            raise ShardFormatError(path, 11, f"empty shard (n={n}, rows={rows})")
        tag = fh.read(tag_len)
        if len(tag) < tag_len:
            raise ShardFormatError(path, _FIXED.size + len(tag), "truncated corpus tag")
    try:
        corpus_tag = tag.decode("utf-8")
    except UnicodeDecodeError:
        raise ShardFormatError(path, _FIXED.size, "corpus tag is not valid utf-8") from None
    offset = _FIXED.size + tag_len
    expected = offset + rows * n * 4
    if size < expected:
        raise ShardFormatError(path, size, f"truncated payload: {size - offset} of {rows * n * 4} bytes")
    if size > expected:
        raise ShardFormatError(path, expected, f"{size - expected} trailing bytes after payload")
    return ShardHeader(SITES[site], layer, n, rows, corpus_tag, offset)


def open_shard(path):
    """Return ``(header, rows)`` with ``rows`` a read-only memory map."""
    header = read_header(path)
    rows = np.memmap(path, dtype="<f4", mode="r", offset=header.data_offset, shape=(header.row_count, header.n))
    return header, rows


def write_shard(path, rows: np.ndarray, site_spec: SiteSpec, corpus_tag: str = "") -> Path:
    """Write a whole shard atomically."""
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("a shard needs a non-empty 2-D row block")
    with ShardWriter(path, site_spec, rows.shape[1], corpus_tag) as w:
        w.write(rows)
    return Path(path)


class ShardWriter:
    """Streams rows into one shard; the header row count is patched on close."""

    def __init__(self, path, site_spec: SiteSpec, n: int, corpus_tag: str = ""):
        self.path = Path(path)
        self.site_spec = site_spec
        self.n = n
        self.corpus_tag = corpus_tag
        self.rows = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self._tmp = tempfile.mkstemp(dir=self.path.parent, prefix=f".{self.path.name}.", suffix=".tmp")
        self._fh = os.fdopen(fd, "wb")
        self._fh.write(encode_header(site_spec, n, 0, corpus_tag))

    @property
    def nbytes(self) -> int:
        return self.rows * self.n * 4

    def write(self, rows: np.ndarray) -> None:
        rows = np.ascontiguousarray(rows, dtype="<f4")
        if rows.ndim != 2 or rows.shape[1] != self.n:
            raise ValueError(f"rows have shape {rows.shape}, shard width is {self.n}")
        self._fh.write(rows.tobytes())
        self.rows += rows.shape[0]

    def close(self) -> Path | None:
        if self._fh is None:
            return self.path
        if self.rows == 0:
            self.abort()
            return None
        self._fh.seek(0)
        self._fh.write(encode_header(self.site_spec, self.n, self.rows, self.corpus_tag))
        self._fh.close()
        self._fh = None
        os.replace(self._tmp, self.path)
        return self.path

    def abort(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        if os.path.exists(self._tmp):
            os.unlink(self._tmp)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def shard_name(model: str, site_spec: SiteSpec, seq: int) -> str:
    return f"{model}_{site_spec.site}_{site_spec.layer}_{seq:05d}.ashd"


class ShardSetWriter:
    """Splits a row stream into consecutive shards of at most ``max_bytes`` each."""

    def __init__(self, out_dir, model: str, site_spec: SiteSpec, n: int, corpus_tag: str = "",
                 max_bytes: int = DEFAULT_SHARD_BYTES, row_counts: Sequence[int] | None = None):
        self.out_dir = Path(out_dir)
        self.model = model
        self.site_spec = site_spec
        self.n = n
        self.corpus_tag = corpus_tag
        self.max_rows = max(1, max_bytes // (4 * n))
        self._row_counts = list(row_counts) if row_counts is not None else None
        self.paths: list[Path] = []
        self._current: ShardWriter | None = None

    def _limit(self) -> int:
        if self._row_counts is not None:
            return self._row_counts[len(self.paths)]
        return self.max_rows

    def write(self, rows: np.ndarray) -> None:
        pos = 0
        while pos < rows.shape[0]:
            if self._current is None:
                name = shard_name(self.model, self.site_spec, len(self.paths))
                self._current = ShardWriter(self.out_dir / name, self.site_spec, self.n, self.corpus_tag)
            room = self._limit() - self._current.rows
            chunk = rows[pos : pos + room]
            self._current.write(chunk)
            pos += chunk.shape[0]
            if self._current.rows >= self._limit():
                self._finish()

    def _finish(self):
        path = self._current.close()
        if path is not None:
            self.paths.append(path)
        self._current = None

    def close(self) -> list[Path]:
        if self._current is not None:
            self._finish()
        return self.paths

    def abort(self) -> None:
        if self._current is not None:
            self._current.abort()
            self._current = None


# --- reading --------------------------------------------------------------


class ShardDataset:
    """Random access over the concatenated rows of an ordered list of shards.

    ``mmap=False`` reads with ``os.pread`` instead of memory maps, so touched
    pages do not accumulate in the process's resident set (used by servers).
    """

    def __init__(self, paths: Sequence, mmap: bool = True):
        if not paths:
            raise ValueError("no shards given")
        self.paths = [Path(p) for p in paths]
        self.headers = [read_header(p) for p in self.paths]
        widths = {h.n for h in self.headers}
        if len(widths) != 1:
            raise ValueError(f"shards disagree on row width: {sorted(widths)}")
        self.n = widths.pop()
        self.starts = np.cumsum([0] + [h.row_count for h in self.headers])
        self.total_rows = int(self.starts[-1])
        self._maps: dict[int, np.ndarray] = {}
        self.mmap = mmap

    def _read_plain(self, k: int, local: int, take: int, out: np.ndarray) -> None:
        h = self.headers[k]
        width = 4 * h.n
        want = take * width
        with open(self.paths[k], "rb", buffering=0) as fh:
            data = os.pread(fh.fileno(), want, h.data_offset + local * width)
        if len(data) != want:
            raise ShardFormatError(self.paths[k], h.data_offset + local * width + len(data), "truncated payload")
        out[:] = np.frombuffer(data, dtype="<f4").reshape(take, h.n)

    def _rows(self, k: int) -> np.ndarray:
        if k not in self._maps:
            h = self.headers[k]
            self._maps[k] = np.memmap(self.paths[k], dtype="<f4", mode="r", offset=h.data_offset,
                                      shape=(h.row_count, h.n))
        return self._maps[k]

    def read_rows(self, start: int, count: int, out: np.ndarray | None = None) -> np.ndarray:
        if start < 0 or start + count > self.total_rows:
            raise IndexError(f"rows [{start}, {start + count}) outside dataset of {self.total_rows}")
        if out is None:
            out = np.empty((count, self.n), dtype=np.float32)
        k = int(np.searchsorted(self.starts, start, side="right")) - 1
        filled = 0
        while filled < count:
            local = start + filled - int(self.starts[k])
            take = min(count - filled, self.headers[k].row_count - local)
            if self.mmap:
                out[filled : filled + take] = self._rows(k)[local : local + take]
            else:
                self._read_plain(k, local, take, out[filled : filled + take])
            filled += take
            k += 1
        return out

    def num_batches(self, batch_size: int) -> int:
        return self.total_rows // batch_size

    def batch(self, index: int, batch_size: int, c: float = 1.0) -> np.ndarray:
        rows = self.read_rows(index * batch_size, batch_size)
        if c != 1.0:
            rows /= np.float32(c)
        return rows


def read_batches(shards: Sequence, batch_size: int, norm=1.0, start: int = 0, stop: int | None = None):
    """Yield consecutive ``batch_size`` x n float32 batches divided by the norm constant.

    The trailing partial batch is dropped.
    """
    c = float(getattr(norm, "c", norm))
    if not c > 0:
        raise ValueError("normalization constant must be positive")
    ds = shards if isinstance(shards, ShardDataset) else ShardDataset(shards)
    stop = ds.num_batches(batch_size) if stop is None else min(stop, ds.num_batches(batch_size))
    for i in range(start, stop):
        yield ds.batch(i, batch_size, c)


def read_paired_batches(inputs: Sequence, targets: Sequence, batch_size: int, norm=1.0):
    """Yield ``(input, target)`` batches from two row-aligned shard sets, both divided by ``norm``."""
    a = ShardDataset(inputs)
    b = ShardDataset(targets)
    if a.total_rows != b.total_rows:
        raise ValueError(f"paired shards differ in length: {a.total_rows} vs {b.total_rows}")
    yield from zip(read_batches(a, batch_size, norm), read_batches(b, batch_size, norm))


def iter_row_blocks(shards: Sequence, block_rows: int = 65536):
    ds = shards if isinstance(shards, ShardDataset) else ShardDataset(shards)
    for start in range(0, ds.total_rows, block_rows):
        yield ds.read_rows(start, min(block_rows, ds.total_rows - start))


# --- shuffling ------------------------------------------------------------


def bucket_permutation(seed: int, bucket: int, length: int) -> np.ndarray:
    return np.random.default_rng([seed, bucket]).permutation(length)


def shuffle_buckets(shards: Sequence, out_dir, bucket_size: int = DEFAULT_BUCKET_SIZE, seed: int = 0) -> list[Path]:
    """Permute rows uniformly within consecutive buckets of ``bucket_size`` rows.

    Output shards keep the input filenames and row counts. Two shard sets with
    equal total length shuffled with the same seed get the same permutation.
    """
    if bucket_size < 1:
        raise ValueError("bucket_size must be at least 1")
    ds = ShardDataset(shards)
    out_dir = Path(out_dir)
    if any(p.resolve().parent == out_dir.resolve() for p in ds.paths):
        raise ValueError("output directory must differ from the input shard directory")
    writers = []
    for path, h in zip(ds.paths, ds.headers):
        writers.append((out_dir / path.name, h))
    k = 0
    current = None
    written = 0
    outputs = []
    try:
        for bucket, start in enumerate(range(0, ds.total_rows, bucket_size)):
            length = min(bucket_size, ds.total_rows - start)
            rows = ds.read_rows(start, length)[bucket_permutation(seed, bucket, length)]
            pos = 0
            while pos < length:
                if current is None:
                    path, h = writers[k]
                    current = ShardWriter(path, h.site_spec, h.n, h.corpus_tag)
                    written = 0
                take = min(length - pos, writers[k][1].row_count - written)
                current.write(rows[pos : pos + take])
                pos += take
                written += take
                if written == writers[k][1].row_count:
                    outputs.append(current.close())
                    current = None
                    k += 1
    except BaseException:
        if current is not None:
            current.abort()
        raise
    return outputs


# --- collection -----------------------------------------------------------


def collect(host, corpus: np.ndarray, site_specs, out_dir, model: str = "toy", corpus_tag: str = "",
            batch_seqs: int = 16, max_bytes: int = DEFAULT_SHARD_BYTES) -> dict[SiteSpec, list[Path]]:
    """Run ``host`` over ``corpus`` and write activations of non-special tokens.

    ``host`` must provide ``capture(tokens, site_specs) -> list[array (B, T, n)]``
    and ``special_mask(tokens) -> bool array (B, T)``. Rows are emitted in
    sequence-major, position-minor order; all sites share the same positions,
    so shard sets collected together stay row-aligned.
    """
    if isinstance(site_specs, SiteSpec):
        site_specs = [site_specs]
    corpus = np.asarray(corpus)
    writers = {}
    try:
        for start in range(0, corpus.shape[0], batch_seqs):
            tokens = corpus[start : start + batch_seqs]
            keep = ~np.asarray(host.special_mask(tokens))
            acts = host.capture(tokens, site_specs)
            for spec, act in zip(site_specs, acts):
                act = np.asarray(act, dtype=np.float32)
                if spec not in writers:
                    writers[spec] = ShardSetWriter(Path(out_dir), model, spec, act.shape[-1], corpus_tag, max_bytes)
                elif act.shape[-1] != writers[spec].n:
                    raise ValueError(f"site {spec.site} changed width to {act.shape[-1]}")
                rows = act[keep]
                if rows.shape[0]:
                    writers[spec].write(rows)
    except BaseException:
        for w in writers.values():
            w.abort()
        raise
    return {spec: w.close() for spec, w in writers.items()}
