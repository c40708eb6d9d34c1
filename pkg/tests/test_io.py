import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dagr.errors import IoError
from dagr.geom import modality_set
from dagr.io import (
    ReportEnvelope,
    dump_rows,
    format_float,
    parse_embedding_dump,
    read_embedding_dump,
    read_envelope,
    to_jsonable,
    write_csv,
    write_embedding_dump,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)

HEADER = "modality,sample_id,label,e0,e1\n"


def test_format_float_round_trips():
    for x in (0.1, 1 / 3, -2.5e-300, 123456789.123, 0.0):
        assert float(format_float(x)) == x


@given(st.integers(1, 6).flatmap(lambda b: st.tuples(
    arrays(np.float64, (b, 3), elements=finite), arrays(np.float64, (b, 2), elements=finite),
    st.lists(st.integers(0, 4), min_size=b, max_size=b))))
def test_dump_round_trip(case):
    a, b, labels = case
    s = modality_set([a, b], labels, ["audio", "video"])
    back = parse_embedding_dump("\n".join(",".join(r) for r in dump_rows(s)))
    assert back.modality_names == ["audio", "video"]
    np.testing.assert_array_equal(back.labels, labels)
    for x, y in zip(s.arrays(), back.arrays()):
        np.testing.assert_allclose(y, x, atol=1e-9, rtol=0)


def test_dump_file_layout(tmp_path):
    s = modality_set([np.eye(2), 2 * np.eye(2)], [1, 0])
    path = write_embedding_dump(tmp_path / "d" / "emb.csv", s, sample_ids=[5, 3])
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "modality,sample_id,label,e0,e1"
    assert [l.split(",")[:3] for l in lines[1:]] == [["m0", "3", "0"], ["m0", "5", "1"], ["m1", "3", "0"], ["m1", "5", "1"]]
    back = read_embedding_dump(path)
    np.testing.assert_array_equal(back.aux["sample_ids"], [3, 5])
    np.testing.assert_array_equal(back.arrays()[0], [[0.0, 1.0], [1.0, 0.0]])


@pytest.mark.parametrize("text", [
    "",
    "mod,sample_id,label,e0\n",
    HEADER + "a,0,0,1.0\n",
    HEADER + "a,0,0,1.0,x\n",
    HEADER + "a,0,0,1.0,nan\n",
    HEADER + "a,0,0,1,2\na,0,0,3,4\n",
    HEADER + "a,0,0,1,2\na,1,0,3,4\nb,0,0,1,2\n",
    HEADER + "a,0,0,1,2\na,1,0,3,\n",
    HEADER + "a,0,0,1,2\nb,0,1,1,2\n",
])
def test_invalid_dumps_rejected(text):
    with pytest.raises(IoError):
        parse_embedding_dump(text)


def test_per_modality_widths_padded():
    s = modality_set([np.ones((2, 3)), np.ones((2, 1))], [0, 1])
    rows = dump_rows(s)
    assert rows[-1][-2:] == ["", ""]
    back = parse_embedding_dump("\n".join(",".join(r) for r in rows))
    assert [b.d for b in back.batches] == [3, 1]


def test_unreadable_paths(tmp_path):
    with pytest.raises(IoError):
        read_embedding_dump(tmp_path / "missing.csv")
    with pytest.raises(IoError):
        read_envelope(tmp_path / "missing.json")


def test_envelope_keys_and_json(tmp_path):
    env = ReportEnvelope("train", {"tau": 0.25}, 3, {"x": np.array([1.0, np.inf]), "n": np.int64(2)})
    d = json.loads(env.to_json())
    assert list(d) == ["version", "command", "config_echo", "seed", "started_at", "results"]
    assert d["results"] == {"x": [1.0, None], "n": 2}
    back = read_envelope(env.write(tmp_path / "r.json"))
    assert back.to_dict() == env.to_dict()
    (tmp_path / "bad.json").write_text('{"version": "1"}')
    with pytest.raises(IoError):
        read_envelope(tmp_path / "bad.json")


def test_to_jsonable_handles_nesting():
    assert to_jsonable({1: (np.float64(0.5), [np.bool_(True), float("nan")])}) == {"1": [0.5, [True, None]]}


def test_write_csv_formats_floats(tmp_path):
    path = write_csv(tmp_path / "s.csv", [["a", "b"], [1, 0.1]])
    assert path.read_text().splitlines() == ["a,b", "1,0.10000000000000001"]
