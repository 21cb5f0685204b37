import struct

import numpy as np
import pytest

from jumpsae.standardize import estimate_norm_constant
from jumpsae.store import (
    ShardDataset,
    ShardFormatError,
    ShardSetWriter,
    SiteSpec,
    collect,
    iter_row_blocks,
    read_batches,
    read_header,
    read_paired_batches,
    shard_name,
    shuffle_buckets,
    write_shard,
)

SITE = SiteSpec("resid_post_mlp", 1)


def test_site_spec_validation():
    with pytest.raises(ValueError):
        SiteSpec("embed", 0)
    with pytest.raises(ValueError):
        SiteSpec("resid_post_mlp", -1)


def test_header_layout(tmp_path):
    path = write_shard(tmp_path / "a.ashd", np.ones((3, 2)), SITE, "web")
    raw = path.read_bytes()
    assert raw[:4] == b"ASHD"
    version, site, layer, n, rows, tag_len = struct.unpack_from("<IBHIQH", raw, 4)
    assert (version, site, layer, n, rows, tag_len) == (1, 2, 1, 2, 3, 3)
    assert raw[25:28] == b"web"
    assert len(raw) == 28 + 3 * 2 * 4
    h = read_header(path)
    assert h.corpus_tag == "web" and h.site_spec == SITE


def test_roundtrip_bitwise(tmp_path, rng):
    bits = rng.integers(0, 2**32, size=(1000, 7), dtype=np.uint32)
    rows = bits.view(np.float32)
    rows[~np.isfinite(rows)] = 1.5
    path = write_shard(tmp_path / "r.ashd", rows, SITE)
    ds = ShardDataset([path])
    assert ds.read_rows(0, 1000).tobytes() == rows.tobytes()
    batches = list(read_batches([path], 100, norm=1.0))
    assert np.concatenate(batches).tobytes() == rows.tobytes()


def test_batches_cross_shards_and_drop_partial(tmp_path, rng):
    rows = rng.normal(size=(250, 4)).astype(np.float32)
    w = ShardSetWriter(tmp_path, "m", SITE, 4, max_bytes=60 * 16)
    w.write(rows[:100])
    w.write(rows[100:])
    paths = w.close()
    assert [p.name for p in paths] == [shard_name("m", SITE, k) for k in range(5)]
    assert paths[0].name == "m_resid_post_mlp_1_00000.ashd"
    batches = list(read_batches(paths, 64, norm=2.0))
    assert len(batches) == 3
    np.testing.assert_array_equal(np.concatenate(batches), rows[:192] / np.float32(2.0))


def test_normalized_mean_square_norm(tmp_path, rng):
    rows = (rng.normal(size=(20000, 16)) * 7.0).astype(np.float32)
    path = write_shard(tmp_path / "n.ashd", rows, SITE)
    norm = estimate_norm_constant(iter_row_blocks([path]), sample_count=5000)
    out = np.concatenate(list(read_batches([path], 500, norm)))
    assert abs(np.mean(np.sum(out.astype(np.float64) ** 2, axis=1)) - 1.0) < 0.05


def test_corrupt_header_and_truncation(tmp_path, rng):
    path = write_shard(tmp_path / "ok.ashd", rng.normal(size=(10, 3)), SITE)
    good = path.read_bytes()

    bad_magic = tmp_path / "magic.ashd"
    bad_magic.write_bytes(b"XSHD" + good[4:])
    with pytest.raises(ShardFormatError, match="bad magic") as e:
        read_header(bad_magic)
    assert e.value.offset == 0 and e.value.path == str(bad_magic)

    bad_version = tmp_path / "ver.ashd"
    bad_version.write_bytes(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(ShardFormatError, match="version"):
        read_header(bad_version)

    short = tmp_path / "short.ashd"
    short.write_bytes(good[:-5])
    with pytest.raises(ShardFormatError, match="truncated payload") as e:
        list(read_batches([short], 2))
    assert e.value.offset == len(good) - 5

    stub = tmp_path / "stub.ashd"
    stub.write_bytes(good[:10])
    with pytest.raises(ShardFormatError, match="truncated header"):
        read_header(stub)

    extra = tmp_path / "extra.ashd"
    extra.write_bytes(good + b"\0\0\0\0")
    with pytest.raises(ShardFormatError, match="trailing"):
        read_header(extra)


def test_shuffle_preserves_multiset_and_buckets(tmp_path, rng):
    n_rows, bucket = 10_000, 3000
    rows = np.zeros((n_rows, 3), np.float32)
    rows[:, 0] = np.arange(n_rows)
    rows[:, 1:] = rng.normal(size=(n_rows, 2))
    src = tmp_path / "src"
    w = ShardSetWriter(src, "m", SITE, 3, max_bytes=4000 * 12)
    w.write(rows)
    paths = w.close()
    out = shuffle_buckets(paths, tmp_path / "out", bucket_size=bucket, seed=5)
    assert [p.name for p in out] == [p.name for p in paths]
    shuffled = ShardDataset(out).read_rows(0, n_rows)
    # sort-and-compare multiset oracle
    key = lambda a: sorted(map(bytes, a.view(np.uint8).reshape(a.shape[0], -1)))
    assert key(shuffled) == key(rows)
    origin = shuffled[:, 0].astype(int)
    assert not np.array_equal(origin, np.arange(n_rows))
    np.testing.assert_array_equal(origin // bucket, np.arange(n_rows) // bucket)

    again = shuffle_buckets(paths, tmp_path / "out2", bucket_size=bucket, seed=5)
    assert ShardDataset(again).read_rows(0, n_rows).tobytes() == shuffled.tobytes()


def test_shuffle_single_bucket_is_full_permutation(tmp_path):
    rows = np.arange(40, dtype=np.float32).reshape(20, 2)
    path = write_shard(tmp_path / "a" / "x.ashd", rows, SITE)
    out = shuffle_buckets([path], tmp_path / "b", bucket_size=100, seed=1)
    got = ShardDataset(out).read_rows(0, 20)
    perm = np.random.default_rng([1, 0]).permutation(20)
    np.testing.assert_array_equal(got, rows[perm])


def test_paired_shuffle_keeps_alignment(tmp_path, rng):
    a = rng.normal(size=(500, 4)).astype(np.float32)
    b = 2 * a
    pa = write_shard(tmp_path / "in" / "a.ashd", a, SiteSpec("mlp_in_post_norm", 0))
    pb = write_shard(tmp_path / "tg" / "b.ashd", b, SiteSpec("mlp_out_post_norm", 0))
    sa = shuffle_buckets([pa], tmp_path / "sa", 128, seed=3)
    sb = shuffle_buckets([pb], tmp_path / "sb", 128, seed=3)
    for x, y in read_paired_batches(sa, sb, 50, norm=4.0):
        np.testing.assert_array_equal(y, 2 * x)


class FakeHost:
    """Site activations encode (sequence, position) so rows can be traced."""

    special = {0, 1, 2}

    def special_mask(self, tokens):
        return np.isin(tokens, list(self.special))

    def capture(self, tokens, specs):
        b, t = tokens.shape
        base = np.stack(np.meshgrid(np.arange(b), np.arange(t), indexing="ij"), -1).astype(np.float32)
        return [np.concatenate([base, tokens[..., None].astype(np.float32)], -1) for _ in specs]


def test_collect_masks_special_tokens(tmp_path):
    corpus = np.array([[0, 5, 6, 7, 8, 9, 10, 11, 12, 1], [0, 2, 2, 2, 2, 2, 2, 2, 2, 2]])
    out = collect(FakeHost(), corpus, SITE, tmp_path, model="fake", batch_seqs=1)
    ds = ShardDataset(out[SITE])
    assert ds.total_rows == 8
    np.testing.assert_array_equal(ds.read_rows(0, 8)[:, 2], np.arange(5, 13))

    only_special = collect(FakeHost(), np.array([[0, 2, 1]]), SITE, tmp_path / "empty")
    assert only_special[SITE] == []
