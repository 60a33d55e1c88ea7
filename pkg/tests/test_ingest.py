import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbench.datagen import UNIFIED_LABELS, fed_ecg_analog, fed_echo_analog, gen_scenario
from fedbench.errors import ConfigurationError, ParseError, SchemaError, ShapeError
from fedbench.ingest import (DROP, LabelAlignmentTable, RawRecord, align_labels, load_dataset_csv,
                             pad_or_truncate, resize_mask_nearest, save_dataset_csv)

TABLE = LabelAlignmentTable.load()


def onehot(*codes):
    v = np.zeros(20, dtype=np.int64)
    for c in codes:
        v[UNIFIED_LABELS.index(c)] = 1
    return v


# -- pad / truncate ---------------------------------------------------------

def test_identity_at_target_length():
    x = np.random.default_rng(0).normal(size=(12, 5000))
    assert np.array_equal(pad_or_truncate(x), x)


def test_edge_padding_by_hand():
    x = np.tile([1.0, 2.0, 3.0], (12, 1))
    out = pad_or_truncate(x, 5)
    assert np.array_equal(out[0], [1, 2, 3, 3, 3]) and out.shape == (12, 5)


def test_truncation_keeps_first_columns():
    x = np.random.default_rng(1).normal(size=(12, 7000))
    assert np.array_equal(pad_or_truncate(x), x[:, :5000])


@pytest.mark.parametrize("shape", [(11, 100), (12, 0), (12,)])
def test_pad_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        pad_or_truncate(np.zeros(shape))


@settings(max_examples=40, deadline=None)
@given(t=st.integers(1, 300), target=st.integers(1, 200))
def test_pad_idempotent_and_length_correct(t, target):
    x = np.random.default_rng(t).normal(size=(12, t))
    once = pad_or_truncate(x, target)
    assert once.shape == (12, target)
    assert np.array_equal(pad_or_truncate(once, target), once)
    keep = min(t, target)
    assert np.array_equal(once[:, :keep], x[:, :keep])
    assert np.all(once[:, keep:] == x[:, [keep - 1]])


# -- label alignment ------------------------------------------------------------

def test_alignment_goldens():
    assert np.array_equal(align_labels(RawRecord("PTB-XL", np.zeros((12, 1)), ("Sinus tachycardia",)), TABLE),
                          onehot("STACH"))
    assert np.array_equal(align_labels(RawRecord("G12EC", np.zeros((12, 1)), ("427084000",)), TABLE),
                          onehot("STACH"))


def test_alignment_multi_hot_and_unmapped_ignored():
    rec = RawRecord("PTB-XL", np.zeros((12, 1)), ("Sinus tachycardia", "Normal", "made up"))
    assert np.array_equal(align_labels(rec, TABLE), onehot("STACH", "NORM"))


def test_alignment_drops_unmapped_records():
    assert align_labels(RawRecord("PTB-XL", np.zeros((12, 1)), ("made up",)), TABLE) is DROP
    # a label known to one source is not known to another
    assert align_labels(RawRecord("SPH", np.zeros((12, 1)), ("427084000",)), TABLE) is DROP


@settings(max_examples=30, deadline=None)
@given(st.permutations(["Sinus tachycardia", "Normal", "Sinus bradycardia", "nonsense"]))
def test_alignment_order_invariant(labels):
    ref = align_labels(RawRecord("PTB-XL", np.zeros((12, 1)), ("Normal", "Sinus bradycardia",
                                                                 "Sinus tachycardia")), TABLE)
    assert np.array_equal(align_labels(RawRecord("PTB-XL", np.zeros((12, 1)), tuple(labels)), TABLE), ref)


def test_bundled_table_shared_label_rule():
    assert len(TABLE) >= 40 and TABLE.codes == UNIFIED_LABELS
    for code in UNIFIED_LABELS:
        assert len({src for (src, _), c in TABLE.entries.items() if c == code}) >= 2


def test_table_rejects_single_source_code():
    text = "code\tsource\traw_label\nNORM\tA\tn\nNORM\tB\tn\nSTACH\tA\tst\n"
    with pytest.raises(ConfigurationError):
        LabelAlignmentTable.from_text(text)


def test_table_parse_errors():
    with pytest.raises(SchemaError):
        LabelAlignmentTable.from_text("a\tb\n")
    with pytest.raises(ParseError) as err:
        LabelAlignmentTable.from_text("code\tsource\traw_label\nNORM\tA\n")
    assert err.value.line == 2


def test_custom_table_file(tmp_path):
    p = tmp_path / "map.tsv"
    p.write_text("code\tsource\traw_label\nX\tA\tx1\nX\tB\tx2\nY\tA\ty\nY\tC\ty\n")
    table = LabelAlignmentTable.load(p)
    assert table.codes == ("X", "Y")
    assert np.array_equal(align_labels(RawRecord("C", np.zeros((12, 1)), ("y",)), table), [0, 1])


# -- mask resizing ----------------------------------------------------------------

def test_resize_identity_and_constant():
    m = np.random.default_rng(0).integers(0, 4, size=(112, 112))
    assert np.array_equal(resize_mask_nearest(m), m)
    assert np.all(resize_mask_nearest(np.full((224, 224), 3)) == 3)


def test_resize_two_by_two_blocks():
    out = resize_mask_nearest(np.array([[1, 2], [3, 0]]), 4)
    assert np.array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 0, 0], [3, 3, 0, 0]])


def test_resize_rejects_empty():
    with pytest.raises(ShapeError):
        resize_mask_nearest(np.zeros((0, 5), dtype=int))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 40), w=st.integers(1, 40), target=st.integers(1, 60), seed=st.integers(0, 99))
def test_resize_preserves_class_set(h, w, target, seed):
    m = np.random.default_rng(seed).integers(0, 5, size=(h, w))
    out = resize_mask_nearest(m, target)
    assert out.shape == (target, target)
    assert set(np.unique(out)) <= set(np.unique(m))


# -- CSV dataset format ---------------------------------------------------------

def assert_client_equal(a, b):
    assert a.client_id == b.client_id and a.completeness == b.completeness
    for x, y in ((a.train, b.train), (a.test, b.test)):
        assert np.array_equal(x.features, y.features) and np.array_equal(x.targets, y.targets)
        if x.ignore_mask is not None:
            assert np.array_equal(x.ignore_mask, y.ignore_mask)


@pytest.mark.parametrize("scenario,task", [(fed_ecg_analog(scale=0.002), "multilabel"),
                                           (fed_echo_analog(samples_per_client=(10, 10, 10)), "segmentation")])
def test_csv_round_trip_exact(tmp_path, scenario, task):
    ds = gen_scenario(scenario)
    for c in ds.clients:
        p = tmp_path / f"client_{c.client_id}.csv"
        save_dataset_csv(c, p, task)
        back, got_task = load_dataset_csv(p)
        assert got_task == task
        assert_client_equal(c, back)


@pytest.fixture
def saved(tmp_path):
    ds = gen_scenario(fed_ecg_analog(scale=0.002))
    p = tmp_path / "c.csv"
    save_dataset_csv(ds.clients[0], p, "multilabel")
    return p


def test_csv_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(ParseError):
        load_dataset_csv(p)


def test_csv_missing_column_is_schema_error(saved):
    lines = saved.read_text().splitlines()
    header_at = next(i for i, ln in enumerate(lines) if ln.startswith("split"))
    cols = lines[header_at].split(",")
    lines[header_at] = ",".join(c for c in cols if c != "feature_3")
    saved.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError):
        load_dataset_csv(saved)


def test_csv_malformed_row_reports_line(saved):
    lines = saved.read_text().splitlines()
    header_at = next(i for i, ln in enumerate(lines) if ln.startswith("split"))
    bad = header_at + 3
    lines[bad] = lines[bad].rsplit(",", 1)[0]
    saved.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        load_dataset_csv(saved)
    assert err.value.line == bad + 1


def test_csv_non_numeric_value(saved):
    lines = saved.read_text().splitlines()
    lines[-1] = lines[-1].replace(",", ",abc,", 1).rsplit(",", 1)[0]
    saved.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        load_dataset_csv(saved)
    assert err.value.line == len(lines)


@pytest.mark.parametrize("first", ["# something else 1", "# fedbench-dataset 9"])
def test_csv_bad_marker_or_version(saved, first):
    lines = saved.read_text().splitlines()
    lines[0] = first
    saved.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError):
        load_dataset_csv(saved)


def test_csv_missing_metadata(saved):
    lines = [ln for ln in saved.read_text().splitlines() if not ln.startswith("# task=")]
    saved.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError):
        load_dataset_csv(saved)
