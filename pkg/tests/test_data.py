import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedimpress.data import (
    IMPRESSION,
    ORIGINAL,
    Dataset,
    LabelRegistry,
    PublicDataset,
    apply_injection,
    augment_public,
    build_corpus,
    derive_seed,
    generate_synthetic_dataset,
    load_feature_file,
    partition_round,
    save_feature_file,
)
from fedimpress.errors import ConfigurationError, InputError, ParseError
from fedimpress.impressions import DataImpressionBatch
from fedimpress.nn import ModelSpec, TrainConfig, accuracy, build_classifier, train
from fedimpress.scenario import Injection, load_bundled


# --- synthetic corpus ------------------------------------------------------

def test_well_separated_blobs_are_learnable():
    d = generate_synthetic_dataset(2, 200, 5, 10.0, seed=0)
    model = train(build_classifier(ModelSpec(5, 2), (0, 1)), d.features, d.labels, TrainConfig(epochs=10))
    assert accuracy(model, d.labels, d.features) >= 0.99


def test_class_means_sit_at_the_requested_distance():
    d = generate_synthetic_dataset(3, 4000, 6, 4.0, seed=2)
    means = np.array([d.features[d.labels == k].mean(axis=0) for k in range(3)])
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(means[i] - means[j]) == pytest.approx(4.0, abs=0.15)


def test_corpus_is_seeded():
    a = generate_synthetic_dataset(3, 10, 4, 2.0, seed=1)
    b = generate_synthetic_dataset(3, 10, 4, 2.0, seed=1)
    c = generate_synthetic_dataset(3, 10, 4, 2.0, seed=2)
    assert np.array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)


def test_corpus_size():
    d = generate_synthetic_dataset(8, 300, 40, 4.0)
    assert d.features.shape == (2400, 40)
    assert d.counts() == {k: 300 for k in range(8)}


@pytest.mark.parametrize(
    "args", [(5, 10, 3, 1.0), (0, 10, 3, 1.0), (2, 0, 3, 1.0), (2, 10, 3, 0.0), (2, 10, 3, -1.0)]
)
def test_corpus_rejects_bad_sizes(args):
    with pytest.raises(ConfigurationError):
        generate_synthetic_dataset(*args)


# --- feature files ---------------------------------------------------------

def test_feature_file_round_trip(tmp_path):
    d = generate_synthetic_dataset(3, 5, 4, 2.0, seed=3)
    p = tmp_path / "f.txt"
    save_feature_file(p, d, comments=["made in a test"])
    back = load_feature_file(p)
    assert np.array_equal(back.features, d.features)
    assert np.array_equal(back.labels, d.labels)
    assert p.read_text().startswith("# made in a test\n15 4\n")


@pytest.mark.parametrize(
    "body, line, needle",
    [
        ("2 2\n1.0 2.0 0\n1.0 0\n", 3, "row 2 has 2 fields"),
        ("1 2\n1.0 x 0\n", 2, "non-numeric"),
        ("1 2\n1.0 2.0 -1\n", 2, "negative label"),
        ("3 2\n1.0 2.0 0\n", 1, "declares 3 rows"),
        ("two 2\n", 1, "header"),
        ("# only comments\n", None, "missing"),
    ],
)
def test_feature_file_errors_name_the_line(tmp_path, body, line, needle):
    p = tmp_path / "bad.txt"
    p.write_text(body)
    with pytest.raises(ParseError) as err:
        load_feature_file(p)
    assert err.value.line == line
    assert needle in str(err.value)


def test_missing_feature_file(tmp_path):
    with pytest.raises(ParseError):
        load_feature_file(tmp_path / "nope.txt")


# --- registry and datasets -------------------------------------------------

def test_registry_never_reuses_ids():
    r = LabelRegistry(["a", "b"])
    assert r.mint("c") == 2
    assert r.id("b") == 1 and r.name(2) == "c"
    with pytest.raises(ConfigurationError):
        r.mint("a")
    with pytest.raises(KeyError):
        r.id("z")


def test_dataset_length_mismatch():
    with pytest.raises(InputError):
        Dataset(np.zeros((3, 2)), np.zeros(2))


def test_derive_seed_separates_streams():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert len({derive_seed(1, 2), derive_seed(1, 3), derive_seed(2, 2), derive_seed(1, 2, 1)}) == 4


# --- partitions ------------------------------------------------------------

def test_partition_counts_within_range(tiny_scenario):
    public, pool = build_corpus(tiny_scenario)
    lo, hi = tiny_scenario.frames_per_label
    for it in (1, 2, 3):
        r = partition_round(tiny_scenario, pool, it)
        for m, ds in enumerate(r.datasets):
            counts = ds.counts()
            assert set(counts) == set(tiny_scenario.user_labels[m])
            assert all(lo <= v <= hi for v in counts.values())
        # no source row is handed to two users
        used = np.concatenate(r.indices)
        assert len(np.unique(used)) == len(used)


def test_fixed_range_gives_exact_total(tiny_scenario):
    sc = tiny_scenario.replace(frames_per_label=(50, 50))
    _, pool = build_corpus(sc)
    r = partition_round(sc, pool, 1)
    assert [len(d) for d in r.datasets] == [150, 150]


def test_partition_is_seeded(tiny_scenario):
    _, pool = build_corpus(tiny_scenario)
    a = partition_round(tiny_scenario, pool, 2)
    b = partition_round(tiny_scenario, pool, 2)
    c = partition_round(tiny_scenario, pool, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.indices, b.indices))
    assert not all(np.array_equal(x, y) for x, y in zip(a.indices, c.indices))


def test_public_and_pool_are_disjoint(tiny_scenario):
    public, pool = build_corpus(tiny_scenario)
    assert public.counts() == {k: 40 for k in range(4)}
    assert len(pool) == 5 * 240 - 160
    assert not (set(map(bytes, public.features)) & set(map(bytes, pool.features)))


def test_partition_rejects_bad_iteration(tiny_scenario):
    _, pool = build_corpus(tiny_scenario)
    with pytest.raises(ConfigurationError):
        partition_round(tiny_scenario, pool, 4)


def test_pool_exhaustion_names_the_label(tiny_scenario):
    sc = tiny_scenario.replace(frames_per_label=(150, 150))
    _, pool = build_corpus(sc)
    with pytest.raises(ConfigurationError, match="'B'"):
        partition_round(sc, pool, 1)


# --- injections ------------------------------------------------------------

def test_injection_follows_the_schedule(tiny_scenario):
    _, pool = build_corpus(tiny_scenario)
    E = tiny_scenario.label_id("E")
    r1 = apply_injection(partition_round(tiny_scenario, pool, 1), tiny_scenario, pool)
    assert all(E not in d.counts() for d in r1.datasets)
    assert r1.new_labels == [(), ()]
    r2 = apply_injection(partition_round(tiny_scenario, pool, 2), tiny_scenario, pool)
    assert [d.counts()[E] for d in r2.datasets] == [60, 60]
    assert r2.new_labels == [(E,), (E,)]
    used = np.concatenate(r2.indices)
    assert len(np.unique(used)) == len(used)


def test_empty_schedule_changes_nothing(tiny_scenario):
    sc = tiny_scenario.replace(injections=())
    _, pool = build_corpus(sc)
    r = partition_round(sc, pool, 2)
    assert apply_injection(r, sc, pool) is r


def test_injecting_a_public_label_is_a_collision(tiny_scenario):
    sc = tiny_scenario.replace(injections=(Injection(1, 2, 0, 10),))
    _, pool = build_corpus(sc)
    with pytest.raises(ConfigurationError, match="already in the public label set"):
        apply_injection(partition_round(sc, pool, 2), sc, pool)


# --- public augmentation ---------------------------------------------------

def test_augment_appends_impressions():
    public = PublicDataset(np.zeros((2400, 4)), np.repeat(np.arange(8), 300))
    batch = DataImpressionBatch(np.ones((300, 4)), 0)
    out = augment_public(public, [batch], [8])
    assert len(out) == 2700
    assert out.original_count == 2400
    assert (out.provenance == IMPRESSION).sum() == 300
    assert np.array_equal(out.features[:2400], public.features)
    assert len(public) == 2400


def test_augment_rejects_collisions():
    public = PublicDataset(np.zeros((4, 2)), [0, 0, 1, 1])
    with pytest.raises(ConfigurationError):
        augment_public(public, [np.ones((2, 2))], [1])
    with pytest.raises(ConfigurationError):
        augment_public(public, [np.ones((2, 2)), np.ones((2, 2))], [5, 5])
    with pytest.raises(InputError):
        augment_public(public, [np.ones((2, 3))], [5])


@settings(max_examples=30, deadline=None)
@given(sizes=st.lists(st.integers(1, 20), min_size=0, max_size=4))
def test_public_only_grows(sizes):
    public = PublicDataset(np.zeros((6, 2)), [0, 0, 1, 1, 2, 2])
    for j, n in enumerate(sizes):
        before = len(public)
        public = augment_public(public, [np.full((n, 2), j)], [3 + j])
        assert len(public) == before + n
        assert public.original_count == 6
        assert np.all(public.provenance[:6] == ORIGINAL)


def test_bundled_corpus_scale():
    sc = load_bundled("gkws_homogeneous")
    public, pool = build_corpus(sc)
    assert len(public) == len(sc.public_labels) * sc.corpus.public_frames_per_label
    assert public.dim == sc.feature_dim
