import numpy as np
import pytest

from setformer.data import (ClassSpec, DegenerateDataError, EmptyDatasetError,
                            LabelMap, NormStats, RawRecord, RawSchema,
                            StratifyError, WindowedSample, apply_normalization,
                            build_dataset, compute_norm_stats,
                            default_class_specs, encode_labels, filter_labels,
                            format_record, load_dataset, make_windows,
                            parse_raw, save_dataset, split_by_user,
                            stratified_split, synthesize_windows)


def brute_force_windows(records, window_len, stride):
    """Independent enumerator: scan every offset, filter by the rules."""
    found = []
    users = sorted({r.user_id for r in records})
    for u in users:
        recs = sorted((r for r in records if r.user_id == u), key=lambda r: r.timestamp)
        for start in range(0, len(recs)):
            if start % stride != 0:
                continue
            window = recs[start:start + window_len]
            if len(window) < window_len:
                continue
            if len({r.activity for r in window}) != 1:
                continue
            found.append((u, start, window[0].activity))
    return found


def random_stream(rng):
    """A record stream with several users, label changes and varied lengths."""
    records = []
    labels = ["Jogging", "Sitting", "Walking"]
    for user in range(rng.integers(1, 4)):
        n = int(rng.integers(0, 160))
        t = 0
        label = labels[rng.integers(len(labels))]
        for i in range(n):
            if rng.random() < 0.05:
                label = labels[rng.integers(len(labels))]
            t += int(rng.integers(1, 4))
            records.append(RawRecord(user, label, t, *rng.normal(size=3)))
    rng.shuffle(records)
    return records


class TestParse:
    def test_classic_line(self):
        lines = ["33,Jogging,49105962326000,-0.69,12.68,0.50;"]
        records, rejected = parse_raw(lines)
        assert rejected == 0
        rec = records[0]
        assert rec == RawRecord(33, "Jogging", 49105962326000, -0.69, 12.68, 0.50)

    def test_missing_semicolon_rejected(self):
        lines = ["33,Jogging,49105962326000,-0.69,12.68,0.50",
                 "33,Jogging,49105962326001,-0.69,12.68,0.51;"]
        records, rejected = parse_raw(lines)
        assert len(records) == 1 and rejected == 1

    def test_wrong_field_count_rejected(self):
        lines = ["33,Jogging,49105962326000,-0.69,12.68;",
                 "33,Jogging,49105962326001,-0.69,12.68,0.51;"]
        records, rejected = parse_raw(lines)
        assert len(records) == 1 and rejected == 1

    def test_unparseable_number_rejected(self):
        records, rejected = parse_raw(["33,Jogging,xyz,-0.69,12.68,0.50;",
                                       "34,Walking,7,0.0,9.8,0.1;"])
        assert len(records) == 1 and rejected == 1

    def test_label_whitespace_trimmed(self):
        records, _ = parse_raw(["1,  Walking ,5,0.0,9.8,0.1;"])
        assert records[0].activity == "Walking"

    def test_all_rejected_is_an_error(self):
        with pytest.raises(EmptyDatasetError):
            parse_raw(["garbage", "more garbage"])

    def test_wider_schema(self):
        line = ",".join(["7", "Sitting", "123"] + ["1.5"] * 15) + ";"
        records, rejected = parse_raw([line], RawSchema.with_field_count(18))
        assert rejected == 0
        assert records[0].user_id == 7 and records[0].ax == 1.5

    def test_parse_format_fixed_point(self, rng):
        records, _ = parse_raw(["2,Standing,99,0.25,-1.5,9.0;"])
        again, rejected = parse_raw([format_record(records[0])])
        assert rejected == 0 and again[0] == records[0]


class TestLabels:
    def test_lexicographic_ids(self):
        m = LabelMap(["Walking", "Jogging"])
        assert m.id("Jogging") == 0 and m.id("Walking") == 1

    def test_single_label(self):
        records, _ = parse_raw(["1,Walking,5,0.0,9.8,0.1;"])
        m = encode_labels(records)
        assert len(m) == 1 and m.id("Walking") == 0

    def test_classic_six(self):
        labels = ["Downstairs", "Jogging", "Sitting", "Standing", "Upstairs", "Walking"]
        recs = [RawRecord(1, a, i, 0.0, 0.0, 0.0) for i, a in enumerate(labels)]
        assert len(encode_labels(recs)) == 6

    def test_whitelist_filter(self):
        recs = [RawRecord(1, a, i, 0.0, 0.0, 0.0)
                for i, a in enumerate(["Walking", "Yoga", "Jogging"])]
        kept = filter_labels(recs, ("Walking", "Jogging"))
        assert {r.activity for r in kept} == {"Walking", "Jogging"}
        assert len(filter_labels(recs, ())) == 3


class TestWindows:
    def test_enumeration_count(self):
        recs = [RawRecord(1, "Walking", t, 0.0, 0.0, 0.0) for t in range(500)]
        m = LabelMap(["Walking"])
        samples = make_windows(recs, m, window_len=200, stride=100)
        assert [s.start_index for s in samples] == [0, 100, 200, 300]

    def test_label_change_kills_windows(self):
        recs = ([RawRecord(1, "Walking", t, 0.0, 0.0, 0.0) for t in range(100)]
                + [RawRecord(1, "Jogging", 100 + t, 0.0, 0.0, 0.0) for t in range(100)])
        m = LabelMap(["Walking", "Jogging"])
        assert make_windows(recs, m, window_len=200, stride=100) == []

    def test_short_stream_yields_nothing(self):
        recs = [RawRecord(1, "Walking", t, 0.0, 0.0, 0.0) for t in range(199)]
        m = LabelMap(["Walking"])
        assert make_windows(recs, m, window_len=200, stride=100) == []

    def test_windows_never_span_users(self):
        recs = [RawRecord(u, "Walking", t, float(u), 0.0, 0.0)
                for u in (1, 2) for t in range(120)]
        m = LabelMap(["Walking"])
        samples = make_windows(recs, m, window_len=100, stride=50)
        for s in samples:
            assert (s.x[:, 0] == s.user_id).all()

    def test_against_brute_force(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            records = random_stream(rng)
            if not records:
                continue
            m = LabelMap(r.activity for r in records)
            t, stride = int(rng.integers(5, 40)), int(rng.integers(1, 30))
            got = [(s.user_id, s.start_index, m.label(s.label))
                   for s in make_windows(records, m, window_len=t, stride=stride)]
            assert got == brute_force_windows(records, t, stride)

    def test_adjacent_windows_overlap_by_stride(self):
        recs = [RawRecord(1, "Walking", t, float(t), 0.0, 0.0) for t in range(400)]
        m = LabelMap(["Walking"])
        samples = make_windows(recs, m, window_len=200, stride=100)
        starts = [s.start_index for s in samples]
        assert np.all(np.diff(starts) == 100)
        a, b = samples[0], samples[1]
        assert np.array_equal(a.x[100:], b.x[:100])

    def test_gap_tolerance(self):
        ts = list(range(50)) + [1000 + t for t in range(50)]
        recs = [RawRecord(1, "Walking", t, 0.0, 0.0, 0.0) for t in ts]
        m = LabelMap(["Walking"])
        assert len(make_windows(recs, m, window_len=100, stride=100)) == 1
        assert make_windows(recs, m, window_len=100, stride=100, gap_tolerance=10) == []


class TestNormalization:
    def _samples(self, arr):
        return [WindowedSample(x=a.astype(np.float32), label=0, user_id=0,
                               start_index=i) for i, a in enumerate(arr)]

    def test_two_point_stats(self):
        arr = np.zeros((1, 2, 3))
        arr[0, 0] = [1.0, 1.0, 1.0]
        arr[0, 1] = [3.0, 3.0, 3.0]
        stats = compute_norm_stats(self._samples(arr))
        assert np.allclose(stats.mu, 2.0)
        assert np.allclose(stats.sigma, 1.0)  # population, not sample

    def test_degenerate_axis_is_fatal(self):
        arr = np.random.default_rng(0).normal(size=(2, 4, 3))
        arr[:, :, 2] = 0.0
        with pytest.raises(DegenerateDataError, match="axis 2"):
            compute_norm_stats(self._samples(arr))

    def test_stats_ignore_validation_data(self, rng):
        train = self._samples(rng.normal(size=(5, 6, 3)))
        a = compute_norm_stats(train)
        b = compute_norm_stats(train)  # different "validation" changes nothing
        assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)

    def test_value_at_mean_maps_to_zero(self):
        stats = NormStats(mu=np.array([1.0, 2.0, 3.0]), sigma=np.ones(3))
        s = WindowedSample(x=np.tile([1.0, 2.0, 3.0], (4, 1)).astype(np.float32),
                           label=0, user_id=0, start_index=0)
        assert np.allclose(apply_normalization(s, stats).x, 0.0)

    def test_simple_scaling(self):
        stats = NormStats(mu=np.zeros(3), sigma=np.full(3, 2.0))
        s = WindowedSample(x=np.full((2, 3), 4.0, dtype=np.float32), label=0,
                           user_id=0, start_index=0)
        assert np.allclose(apply_normalization(s, stats).x, 2.0)

    def test_normalized_pool_is_standard(self, rng):
        samples = self._samples(rng.normal(2.5, 3.0, size=(40, 20, 3)))
        stats = compute_norm_stats(samples)
        normed = [apply_normalization(s, stats) for s in samples]
        pool = np.concatenate([s.x for s in normed]).astype(np.float64)
        assert np.abs(pool.mean(axis=0)).max() < 1e-5
        assert np.abs(pool.var(axis=0) - 1).max() < 1e-4


class TestSplit:
    def test_balanced_counts(self):
        labels = [0] * 10 + [1] * 10 + [2] * 10
        s = stratified_split(labels, 0.8, seed=1)
        for cls in range(3):
            assert (np.array(labels)[s.train] == cls).sum() == 8
            assert (np.array(labels)[s.val] == cls).sum() == 2

    def test_same_seed_same_split(self):
        labels = [0] * 37 + [1] * 23
        a = stratified_split(labels, 0.8, seed=5)
        b = stratified_split(labels, 0.8, seed=5)
        assert np.array_equal(a.train, b.train) and np.array_equal(a.val, b.val)

    def test_uneven_class_counts(self):
        labels = [0] * 50 + [1] * 30
        s = stratified_split(labels, 0.8, seed=0)
        y = np.array(labels)
        assert (y[s.train] == 0).sum() == 40
        assert (y[s.train] == 1).sum() == 24

    def test_is_a_partition(self, rng):
        labels = rng.integers(0, 4, size=101)
        labels[:8] = np.arange(4).repeat(2)  # every class at least twice
        s = stratified_split(labels, 0.8, seed=3)
        merged = np.sort(np.concatenate([s.train, s.val]))
        assert np.array_equal(merged, np.arange(len(labels)))

    def test_fraction_within_one_sample(self, rng):
        for trial in range(50):
            counts = rng.integers(2, 60, size=int(rng.integers(2, 6)))
            labels = np.repeat(np.arange(len(counts)), counts)
            s = stratified_split(labels, 0.8, seed=trial)
            for cls, n in enumerate(counts):
                got = (labels[s.train] == cls).sum()
                assert abs(got - 0.8 * n) < 1.0

    def test_singleton_class_rejected(self):
        with pytest.raises(StratifyError):
            stratified_split([0, 0, 1], 0.8, seed=0)

    def test_by_user_never_splits_a_user(self):
        samples = [WindowedSample(np.zeros((4, 3), np.float32), 0, u, i)
                   for u in range(5) for i in range(10)]
        s = split_by_user(samples, 0.8, seed=2)
        users = np.array([x.user_id for x in samples])
        assert set(users[s.train]) & set(users[s.val]) == set()


class TestSynthetic:
    def test_deterministic(self):
        specs = default_class_specs(3)
        a, _ = synthesize_windows(specs, 5, 32, seed=9)
        b, _ = synthesize_windows(specs, 5, 32, seed=9)
        for s1, s2 in zip(a, b):
            assert np.array_equal(s1.x, s2.x) and s1.label == s2.label

    def test_noiseless_offsets_separate_perfectly(self):
        specs = [ClassSpec(offset=(0, 0, 0), amplitude=(0, 0, 0), noise=0.0),
                 ClassSpec(offset=(5, 5, 5), amplitude=(0, 0, 0), noise=0.0)]
        samples, _ = synthesize_windows(specs, 10, 16, seed=0)
        for s in samples:
            predicted = int(s.x.mean() > 2.5)
            assert predicted == s.label

    def test_default_spec_separation(self):
        samples, label_map = synthesize_windows(default_class_specs(3), 50, 64, seed=4)
        means = {k: [] for k in range(3)}
        for s in samples:
            means[s.label].append(s.x.mean(axis=0))
        centroids = {k: np.mean(v, axis=0) for k, v in means.items()}
        spreads = [np.std(np.array(v), axis=0).max() for v in means.values()]
        worst = max(spreads)
        for a in range(3):
            for b in range(a + 1, 3):
                dist = np.linalg.norm(centroids[a] - centroids[b])
                assert dist >= 3 * worst

    def test_bounded(self):
        samples, _ = synthesize_windows(default_class_specs(4), 20, 32, seed=1)
        for s in samples:
            assert np.abs(s.x).max() <= 16.0


class TestContainer:
    def _dataset(self, rng, n_per_class=6, k=3, t=12):
        samples, label_map = synthesize_windows(default_class_specs(k),
                                                n_per_class, t, seed=2)
        return build_dataset(samples, label_map, train_fraction=0.8, seed=7)

    def test_roundtrip_bit_exact(self, tmp_path, rng):
        ds = self._dataset(rng)
        path = tmp_path / "data.bin"
        save_dataset(path, ds)
        loaded = load_dataset(path)
        assert np.array_equal(loaded.x, ds.x)
        assert np.array_equal(loaded.y, ds.y)
        assert np.array_equal(loaded.users, ds.users)
        assert np.array_equal(loaded.starts, ds.starts)
        assert np.array_equal(loaded.split.train, ds.split.train)
        assert np.array_equal(loaded.split.val, ds.split.val)
        assert loaded.label_map == ds.label_map
        assert np.array_equal(loaded.stats.mu, ds.stats.mu)
        assert np.array_equal(loaded.stats.sigma, ds.stats.sigma)

    def test_save_twice_identical_bytes(self, tmp_path, rng):
        ds = self._dataset(rng)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_dataset(p1, ds)
        save_dataset(p2, ds)
        assert p1.read_bytes() == p2.read_bytes()

    def test_training_pool_is_standardized(self, rng):
        ds = self._dataset(rng, n_per_class=40, t=32)
        xt, _ = ds.train_arrays()
        pool = xt.reshape(-1, 3).astype(np.float64)
        assert np.abs(pool.mean(axis=0)).max() < 1e-5
        assert np.abs(pool.var(axis=0) - 1).max() < 1e-4
