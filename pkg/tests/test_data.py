import numpy as np
import pytest

from leia.data import (
    DataFormatError,
    EmbeddingDataset,
    SplitSpec,
    SyntheticConfig,
    generate_synthetic,
    read_dataset,
    split_dataset,
    split_indices,
    write_dataset,
)


def small_dataset(with_groups=True, n=7, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingDataset(
        embeddings=rng.standard_normal((n, d)),
        labels=rng.integers(0, 2, n),
        num_classes=2,
        num_groups=3 if with_groups else 0,
        groups=rng.integers(0, 3, n) if with_groups else None,
    )


def datasets_equal(a: EmbeddingDataset, b: EmbeddingDataset) -> bool:
    if (a.n, a.dim, a.num_classes, a.num_groups) != (b.n, b.dim, b.num_classes, b.num_groups):
        return False
    if not np.array_equal(a.embeddings, b.embeddings):
        return False
    if not np.array_equal(a.labels, b.labels):
        return False
    if (a.groups is None) != (b.groups is None):
        return False
    return a.groups is None or np.array_equal(a.groups, b.groups)


class TestDatasetModel:
    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="at least one example"):
            EmbeddingDataset(embeddings=np.zeros((0, 2)), labels=np.zeros(0, int),
                             num_classes=2)

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError, match="label 2"):
            EmbeddingDataset(embeddings=np.zeros((2, 2)),
                             labels=np.array([0, 2]), num_classes=2)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            EmbeddingDataset(embeddings=np.array([[np.nan, 0.0]]),
                             labels=np.array([0]), num_classes=1)

    def test_rejects_group_mismatch(self):
        with pytest.raises(ValueError, match="num_groups"):
            EmbeddingDataset(embeddings=np.zeros((1, 1)), labels=np.array([0]),
                             num_classes=1, num_groups=2, groups=None)


@pytest.mark.parametrize("fmt", ["binary", "tsv"])
class TestRoundtrip:
    def test_roundtrip_f32_exact(self, tmp_path, fmt):
        ds = small_dataset()
        # what survives the f32 narrowing is exactly recoverable
        expected = EmbeddingDataset(
            embeddings=ds.embeddings.astype(np.float32).astype(np.float64),
            labels=ds.labels, num_classes=ds.num_classes,
            num_groups=ds.num_groups, groups=ds.groups)
        path = tmp_path / f"ds.{fmt}"
        write_dataset(ds, path, fmt)
        assert datasets_equal(read_dataset(path, fmt), expected)

    def test_roundtrip_without_groups(self, tmp_path, fmt):
        ds = small_dataset(with_groups=False)
        path = tmp_path / f"ds.{fmt}"
        write_dataset(ds, path, fmt)
        back = read_dataset(path, fmt)
        assert back.groups is None and back.num_groups == 0

    def test_write_deterministic(self, tmp_path, fmt):
        ds = small_dataset()
        p1, p2 = tmp_path / "a", tmp_path / "b"
        write_dataset(ds, p1, fmt)
        write_dataset(ds, p2, fmt)
        assert p1.read_bytes() == p2.read_bytes()


class TestBinaryFormat:
    def test_header_layout(self, tmp_path):
        ds = small_dataset(n=5, d=2)
        path = tmp_path / "x.lemb"
        write_dataset(ds, path)
        raw = path.read_bytes()
        assert raw[:4] == b"LEMB"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 1  # groups flag bit
        assert int.from_bytes(raw[12:20], "little") == 5
        assert int.from_bytes(raw[20:24], "little") == 2
        assert len(raw) == 32 + 5 * (2 * 4 + 4 + 4)

    def test_no_group_flag_when_absent(self, tmp_path):
        ds = small_dataset(with_groups=False, n=4, d=2)
        path = tmp_path / "x.lemb"
        write_dataset(ds, path)
        raw = path.read_bytes()
        assert int.from_bytes(raw[8:12], "little") == 0
        assert len(raw) == 32 + 4 * (2 * 4 + 4)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.lemb"
        write_dataset(small_dataset(), path)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="bad magic.*offset 0"):
            read_dataset(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "x.lemb"
        write_dataset(small_dataset(), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="version 9.*offset 4"):
            read_dataset(path)

    def test_truncation_names_offset(self, tmp_path):
        path = tmp_path / "x.lemb"
        write_dataset(small_dataset(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(DataFormatError, match="offset"):
            read_dataset(path)

    def test_zero_n_rejected(self, tmp_path):
        path = tmp_path / "x.lemb"
        write_dataset(small_dataset(), path)
        raw = bytearray(path.read_bytes())
        raw[12:20] = (0).to_bytes(8, "little")
        path.write_bytes(bytes(raw[:32]))
        with pytest.raises(DataFormatError, match="n=0"):
            read_dataset(path)

    def test_label_out_of_range_names_record(self, tmp_path):
        ds = small_dataset(with_groups=False, n=3, d=2)
        path = tmp_path / "x.lemb"
        write_dataset(ds, path)
        raw = bytearray(path.read_bytes())
        # label of record 1 sits after header + 1 record + its embedding
        off = 32 + (2 * 4 + 4) + 2 * 4
        raw[off:off + 4] = (7).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match=f"record 1 .*offset {off}"):
            read_dataset(path)


class TestTsvFormat:
    def test_header_line(self, tmp_path):
        ds = small_dataset(n=4, d=2)
        path = tmp_path / "x.tsv"
        write_dataset(ds, path, "tsv")
        first = path.read_text().splitlines()[0]
        assert first == "# lemb-tsv v1 n=4 d=2 c=2 g=3"

    def test_label_out_of_range_names_line(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("# lemb-tsv v1 n=2 d=1 c=2 g=0\n0.5\t0\n0.5\t2\n")
        with pytest.raises(DataFormatError, match="line 3.*label 2"):
            read_dataset(path, "tsv")

    def test_wrong_columns_names_line(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("# lemb-tsv v1 n=1 d=2 c=2 g=0\n0.5\t0\n")
        with pytest.raises(DataFormatError, match="line 2.*columns"):
            read_dataset(path, "tsv")

    def test_row_count_mismatch(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("# lemb-tsv v1 n=3 d=1 c=2 g=0\n0.5\t0\n")
        with pytest.raises(DataFormatError, match="n=3.*1 data rows"):
            read_dataset(path, "tsv")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("not a header\n")
        with pytest.raises(DataFormatError, match="line 1"):
            read_dataset(path, "tsv")


class TestSplit:
    def test_single_fraction_takes_all(self):
        ds = small_dataset(n=9)
        parts = split_dataset(ds, SplitSpec(fractions=[("a", 1.0)], seed=1))
        assert list(parts) == ["a"]
        assert parts["a"].n == 9

    def test_80_20_sizes(self):
        idx = split_indices(10, SplitSpec(
            fractions=[("erm", 0.8), ("leia", 0.2)], seed=0))
        assert len(idx["erm"]) == 8 and len(idx["leia"]) == 2
        assert not set(idx["erm"]) & set(idx["leia"])

    def test_same_seed_same_assignment(self):
        spec = SplitSpec(fractions=[("a", 0.5), ("b", 0.5)], seed=77)
        a = split_indices(20, spec)
        b = split_indices(20, spec)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_partition_property(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            n = int(rng.integers(3, 60))
            k = int(rng.integers(1, 4))
            raw = rng.random(k) + 0.3
            fracs = raw / raw.sum()
            if (np.floor(n * fracs[:-1]) < 1).any() or n - np.floor(
                    n * fracs[:-1]).sum() < 1:
                continue
            spec = SplitSpec(
                fractions=[(f"s{i}", float(f)) for i, f in enumerate(fracs)],
                seed=int(rng.integers(0, 1000)))
            idx = split_indices(n, spec)
            merged = np.concatenate(list(idx.values()))
            assert sorted(merged.tolist()) == list(range(n))

    def test_zero_sized_split_rejected(self):
        with pytest.raises(ValueError, match="0 of 3 examples"):
            split_indices(3, SplitSpec(fractions=[("a", 0.1), ("b", 0.9)], seed=0))

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            SplitSpec(fractions=[("a", 0.5), ("b", 0.4)], seed=0)


class TestSynthetic:
    def test_counts_and_shapes(self):
        ds = generate_synthetic(SyntheticConfig(
            num_known_groups=2, unknown_ratio=0.1, seed=0))
        assert ds.n == 2100 and ds.dim == 7
        assert ds.num_classes == 2 and ds.num_groups == 3
        counts = np.bincount(ds.groups, minlength=3)
        assert counts.tolist() == [100, 1000, 1000]
        assert set(np.unique(ds.labels)) <= {0, 1}

    def test_label_balance(self):
        # sign of a centered Gaussian projection is a fair coin
        for seed in range(5):
            ds = generate_synthetic(SyntheticConfig(
                num_known_groups=2, unknown_ratio=0.5, seed=seed))
            balance = ds.labels.mean()
            assert 0.40 < balance < 0.60

    def test_unknown_group_spurious_gap(self):
        # feature 0 in group 0: +4.5 for label 1 vs -4.5 for label 0
        ds = generate_synthetic(SyntheticConfig(
            num_known_groups=1, unknown_ratio=1.0, seed=2))
        g0 = ds.groups == 0
        f0 = ds.embeddings[g0, 0]
        y = ds.labels[g0]
        gap = f0[y == 1].mean() - f0[y == 0].mean()
        assert gap == pytest.approx(9.0, abs=0.5)

    def test_known_group_spurious_pattern(self):
        ds = generate_synthetic(SyntheticConfig(
            num_known_groups=1, unknown_ratio=0.5, seed=3))
        g1 = ds.groups == 1
        y = ds.labels[g1]
        f0 = ds.embeddings[g1, 0]
        f1 = ds.embeddings[g1, 1]
        assert f1[y == 1].mean() - f1[y == 0].mean() == pytest.approx(8.0, abs=0.5)
        assert f0[y == 1].mean() - f0[y == 0].mean() == pytest.approx(-6.0, abs=0.5)

    def test_stable_feature_moments(self):
        ds = generate_synthetic(SyntheticConfig(
            num_known_groups=2, unknown_ratio=0.5, seed=4))
        stable = ds.embeddings[:, 2:]
        n = ds.n
        assert n >= 2000
        assert np.abs(stable.mean(axis=0)).max() < 4 / np.sqrt(n)
        assert ((stable.var(axis=0) > 0.8) & (stable.var(axis=0) < 1.2)).all()

    def test_deterministic_per_seed(self):
        cfg = SyntheticConfig(num_known_groups=2, unknown_ratio=0.1, seed=9)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        assert a.embeddings.tobytes() == b.embeddings.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_unknown_count_rounds_to_zero(self):
        with pytest.raises(ValueError, match="rounds to 0"):
            generate_synthetic(SyntheticConfig(
                num_known_groups=1, unknown_ratio=0.0004,
                samples_per_known_group=1000, seed=0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SyntheticConfig(num_known_groups=0, unknown_ratio=0.1)
        with pytest.raises(ValueError):
            SyntheticConfig(num_known_groups=1, unknown_ratio=1.5)
        with pytest.raises(ValueError):
            SyntheticConfig(num_known_groups=1, unknown_ratio=0.1,
                            label_noise_sd=0.0)
