import gzip
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cift.data import (
    PAD_TARGET,
    SynthConfig,
    Utterance,
    batch,
    collate,
    generate,
    prototypes,
    read_jsonl,
    synthesize,
    write_jsonl,
)
from cift.errors import ConfigError, ParseError, SchemaError

# ---------------------------------------------------------------- generator


def test_synthesize_without_noise_repeats_prototypes():
    protos = prototypes(SynthConfig(vocab_size=5, feat_dim=3))
    feats, spans = synthesize([3, 1], [2, 2], protos)
    assert np.array_equal(feats, np.stack([protos[3], protos[3], protos[1], protos[1]]))
    assert spans == [(0, 2), (2, 4)]


def test_generate_is_deterministic():
    a = generate(SynthConfig(), 20, seed=4)
    b = generate(SynthConfig(), 20, seed=4)
    assert a == b
    assert all(x.features.tobytes() == y.features.tobytes() for x, y in zip(a, b))
    assert generate(SynthConfig(), 20, seed=5) != a


def test_generate_shapes_spans_and_no_repeats():
    cfg = SynthConfig(vocab_size=4, length=(0, 6))
    for u in generate(cfg, 200, seed=1):
        assert u.features.shape == (sum(b - a for a, b in u.spans), cfg.feat_dim)
        assert len(u.spans) == len(u.targets)
        assert all(t1 != t2 for t1, t2 in zip(u.targets, u.targets[1:]))
        assert all(0 <= t < cfg.vocab_size for t in u.targets)
        if u.spans:
            assert u.spans[0][0] == 0 and all(p[1] == q[0] for p, q in zip(u.spans, u.spans[1:]))


def test_mean_dwell_matches_configuration():
    cfg = SynthConfig(dwell=(8, 16))
    dwells = []
    while len(dwells) < 10_000:
        for u in generate(cfg, 500, seed=len(dwells)):
            dwells.extend(b - a for a, b in u.spans)
    assert abs(np.mean(dwells) - 12.0) <= 0.05 * 12.0


def test_invalid_config():
    with pytest.raises(ConfigError):
        generate(SynthConfig(vocab_size=1), 1, 0)
    with pytest.raises(ConfigError):
        generate(SynthConfig(dwell=(0, 4)), 1, 0)
    with pytest.raises(ConfigError):
        generate(SynthConfig(dwell=(4, 17)), 1, 0)


# ----------------------------------------------------------------------- IO


@pytest.mark.parametrize("suffix", [".jsonl", ".jsonl.gz"])
def test_jsonl_round_trip_is_exact(tmp_path, suffix):
    data = generate(SynthConfig(length=(0, 5)), 100, seed=2)
    path = tmp_path / f"d{suffix}"
    write_jsonl(path, data)
    back = read_jsonl(path)
    assert back == data
    assert all(a.features.tobytes() == b.features.tobytes() for a, b in zip(data, back))


def test_gzip_file_is_compressed(tmp_path):
    path = tmp_path / "d.jsonl.gz"
    write_jsonl(path, generate(SynthConfig(), 3, seed=0))
    with gzip.open(path, "rt") as fh:
        assert len(fh.readlines()) == 3


def test_empty_file_and_empty_targets(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert read_jsonl(empty) == []
    path = tmp_path / "one.jsonl"
    write_jsonl(path, [Utterance("u", np.zeros((0, 4)), [], [])])
    (u,) = read_jsonl(path)
    assert u.targets == [] and u.num_frames == 0


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"id": "a", "features": [[0.0]], "targets": [0]})
    path.write_text(good + "\n" + good + "\n{not json\n")
    with pytest.raises(ParseError) as info:
        read_jsonl(path)
    assert info.value.line == 3


@pytest.mark.parametrize("record", [
    {"id": "a", "features": [[0.0]]},
    {"id": "a", "features": [[0.0, 1.0], [2.0]], "targets": []},
    {"id": "a", "features": [[0.0]], "targets": [-1]},
    {"id": "a", "features": [["x"]], "targets": [0]},
    {"id": "a", "features": [[0.0]], "targets": [0], "spans": [[0, 1], [1, 2]]},
])
def test_schema_violations(tmp_path, record):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(record) + "\n")
    with pytest.raises(SchemaError):
        read_jsonl(path)


def test_inconsistent_width_across_records(tmp_path):
    path = tmp_path / "bad.jsonl"
    rows = [{"id": "a", "features": [[0.0, 1.0]], "targets": [0]}, {"id": "b", "features": [[0.0]], "targets": [0]}]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    with pytest.raises(SchemaError):
        read_jsonl(path)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=12))
def test_float_round_trip_is_bit_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "x.jsonl"
    feats = np.array(values).reshape(-1, 1)
    write_jsonl(path, [Utterance("x", feats, [0])])
    assert read_jsonl(path)[0].features.tobytes() == feats.tobytes()


# ----------------------------------------------------------------- batching


def test_collate_pads_features_and_targets():
    u1 = Utterance("a", np.ones((4, 2)), [1, 2])
    u2 = Utterance("b", np.ones((6, 2)) * 2, [3])
    b = collate([u1, u2])
    assert b.features.shape == (2, 6, 2)
    assert b.frame_mask.tolist() == [[True] * 4 + [False] * 2, [True] * 6]
    assert np.array_equal(b.features[0, 4:], np.zeros((2, 2)))
    assert b.targets.tolist() == [[1, 2], [3, PAD_TARGET]]
    assert b.target_list(1) == [3]


def test_batch_sorts_and_covers_every_utterance():
    data = generate(SynthConfig(), 23, seed=3)
    batches = batch(data, 5)
    assert [len(b) for b in batches] == [5, 5, 5, 5, 3]
    ids = [i for b in batches for i in b.ids]
    assert sorted(ids) == sorted(u.id for u in data)
    lengths = [int(n) for b in batches for n in b.feature_lengths]
    assert lengths == sorted(lengths)


def test_batch_size_must_be_positive():
    with pytest.raises(ConfigError):
        batch(generate(SynthConfig(), 2, seed=0), 0)
