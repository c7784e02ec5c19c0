import numpy as np
import pytest
from hypothesis import given, strategies as st

from cosoco_forge.diff import admit_record, diff_tarballs, differing_runs
from cosoco_forge.synth import (FAMILY_BYTES, ArchiveStore, BenignParams, DatasetManifest, DatasetParams,
                                PayloadSpec, SynthError, build_dataset, inject_payload, mask_ratio,
                                read_split_file, stratified_splits, synth_benign, write_tar)
from cosoco_forge.tar import parse_tar

SMALL = BenignParams(n_files=6, max_size=8000)


def test_differing_runs():
    assert differing_runs(b"abcdef", b"abXdYY") == [(2, 1), (4, 2)]
    assert differing_runs(b"ab", b"abcd") == [(2, 2)]
    assert differing_runs(b"same", b"same") == []


def test_diff_added_modified_deleted():
    a = write_tar([("x", b"hello world"), ("gone", b"bye"), ("y", b"1234")])
    b = write_tar([("x", b"hello WORLD"), ("y", b"1234"), ("new", b"payload")])
    sa, sb = parse_tar(a), parse_tar(b)
    rep = diff_tarballs(sa, sb)
    assert rep.deleted == ["gone"]
    assert [p for p, _ in rep.modified] == ["x"]
    assert rep.modified[0][1] == [(sb.entries[0].content_span[0] + 6, 5)]
    new = sb.entries[2]
    assert rep.added == [("new", (new.start, new.content_end - new.start))]
    assert admit_record(rep)


def test_header_change_marks_whole_header():
    a = write_tar([("x", b"abc")])
    b = write_tar([("x", b"abcd")])  # size field changes
    rep = diff_tarballs(parse_tar(a), parse_tar(b))
    assert rep.modified[0][1] == [(0, 512), (512 + 3, 1)]


def test_deletion_only_not_admitted():
    a = write_tar([("x", b"abc"), ("y", b"q")])
    b = write_tar([("x", b"abc")])
    rep = diff_tarballs(parse_tar(a), parse_tar(b))
    assert rep.deleted == ["y"] and not admit_record(rep)
    assert diff_tarballs(parse_tar(a), parse_tar(a)).is_empty()


def test_benign_is_deterministic():
    assert synth_benign(5, SMALL) == synth_benign(5, SMALL)
    assert synth_benign(5, SMALL) != synth_benign(6, SMALL)
    parse_tar(synth_benign(5, SMALL))


@pytest.mark.parametrize("mode", ["add_file", "modify_bytes", "mixed"])
def test_inject_ranges_cover_payload(mode):
    benign = synth_benign(3, SMALL)
    comp, ranges = inject_payload(benign, PayloadSpec(mode, 300, "Mirai"), seed=9)
    assert diff_tarballs(parse_tar(benign), parse_tar(comp)).affected_ranges() == ranges
    if mode == "modify_bytes":
        assert len(comp) == len(benign) and sum(n for _, n in ranges) == 300
    else:
        assert any(p.startswith("tmp/.mirai-") for p in parse_tar(comp).paths())


def test_inject_errors():
    benign = synth_benign(3, SMALL)
    with pytest.raises(SynthError):
        inject_payload(benign, PayloadSpec("modify_bytes", 10**7), 0)
    with pytest.raises(SynthError):
        inject_payload(benign, PayloadSpec("bogus", 10), 0)


@given(st.integers(0, 2**31), st.sampled_from(["add_file", "modify_bytes", "mixed"]), st.integers(2, 900))
def test_inject_matches_diff(seed, mode, size):
    benign = synth_benign(seed % 1000, SMALL)
    comp, ranges = inject_payload(benign, PayloadSpec(mode, size), seed)
    assert diff_tarballs(parse_tar(benign), parse_tar(comp)).affected_ranges() == ranges


def test_family_table():
    assert FAMILY_BYTES["Tsunami"] == 1024
    assert FAMILY_BYTES["GoBrut"] == 512


def test_stratified_split_ratio():
    strata = {"benign": [f"b{i}" for i in range(100)], "fam": [f"m{i}" for i in range(10)]}
    tags = stratified_splits(strata, np.random.default_rng(0))
    b = [tags[f"b{i}"] for i in range(100)]
    assert (b.count("train"), b.count("val"), b.count("test")) == (70, 10, 20)
    m = [tags[f"m{i}"] for i in range(10)]
    assert (m.count("train"), m.count("val"), m.count("test")) == (7, 1, 2)


@pytest.fixture(scope="module")
def manifest():
    return build_dataset(DatasetParams(n_records=30, tiles=(1, 2), tile_width=64,
                                       family_mix={"Mirai": 0.5, "Gafgyt": 0.5}), seed=11)


def test_dataset_is_pure_function(manifest):
    again = build_dataset(DatasetParams(n_records=30, tiles=(1, 2), tile_width=64,
                                        family_mix={"Mirai": 0.5, "Gafgyt": 0.5}), seed=11)
    assert again.to_jsonl() == manifest.to_jsonl()


def test_dataset_records(manifest):
    comp = [r for r in manifest.records if r.label]
    assert len(comp) == round(30 * 0.34)
    for r in comp:
        b, c = parse_tar(manifest.archive(r)), None
        c = parse_tar(manifest.store.get(r.compromised))
        assert diff_tarballs(parse_tar(manifest.store.get(r.benign)), c).affected_ranges() == list(r.affected_ranges)
        assert r.image_ref == r.compromised
    for r in manifest.records:
        if not r.label:
            assert r.image_ref == r.benign and r.affected_ranges == []
    assert {r.split for r in manifest.records} == {"train", "val", "test"}
    assert all(x.id < y.id for x, y in zip(manifest.split("test"), manifest.split("test")[1:]))


def test_manifest_save_load(tmp_path):
    store = ArchiveStore(tmp_path)
    m = build_dataset(DatasetParams(n_records=12, tiles=(1, 1), tile_width=64,
                                    family_mix={"Mirai": 1.0}, compromised_fraction=0.5), seed=2, store=store)
    path = m.save(tmp_path / "manifest.jsonl")
    back = DatasetManifest.load(path)
    assert back.to_jsonl() == m.to_jsonl()
    r = back.split("train")[0]
    assert back.archive(r) == m.archive(r)


def test_rare_families_are_pooled():
    m = build_dataset(DatasetParams(n_records=40, tiles=(1, 1), tile_width=64,
                                    family_mix={"Mirai": 0.8, "Tsunami": 0.1, "GoBrut": 0.1}), seed=4)
    assert len(m.records) == 40


def test_mask_ratio_near_target():
    m = build_dataset(DatasetParams(n_records=40, family_mix={"Mirai": 0.5, "Gafgyt": 0.5}), seed=5)
    ratios = [mask_ratio(r, len(m.archive(r)), 256) for r in m.records if r.label]
    assert abs(np.mean(ratios) - 0.0032) < 0.0005


def test_read_split_file(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("id,label,split\na,1,Train\nb,0,test\n")
    assert read_split_file(p) == [("a", "1", "train"), ("b", "0", "test")]
    q = tmp_path / "s.jsonl"
    q.write_text('{"id": "a", "label": 1, "split": "val"}\n')
    assert read_split_file(q) == [("a", "1", "val")]
    bad = tmp_path / "bad.csv"
    bad.write_text("name,x\n1,2\n")
    with pytest.raises(ValueError):
        read_split_file(bad)
